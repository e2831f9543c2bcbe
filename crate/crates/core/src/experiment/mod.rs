//! Configuration, the end-to-end runner and the file-level commands used
//! by the `clora` binary.

mod commands;
mod config;
mod runner;

pub use commands::{
    cmd_eval, cmd_netscore, cmd_pareto, cmd_run, cmd_synth, EvalReport, NetScoreRow, CONFIG_SCHEMA,
};
pub use config::{ArchConfig, ExperimentConfig};
pub use runner::{conflict_demo, evaluate, run_experiment, ConflictReport, RunOutcome};
