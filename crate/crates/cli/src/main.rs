//! `clora`: synthetic data generation, experiment runs, evaluation and
//! report tables.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clora_core::engine::TrainMode;
use clora_core::experiment::{cmd_eval, cmd_netscore, cmd_pareto, cmd_run, cmd_synth, ExperimentConfig, NetScoreRow};
use clora_core::metrics::ClassRange;
use clora_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "clora", version, about = "Class-incremental segmentation with a single reusable LoRA adapter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Dataset spec (JSON); the built-in 6-class spec when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset's validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated class ranges, e.g. `0-3,4-5,All`.
        #[arg(long, value_delimiter = ',')]
        ranges: Vec<String>,
        /// Write the evaluation report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// NetScore table over run reports, best first.
    Netscore {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pareto front of mIoU against trainable parameters.
    Pareto {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("CLORA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CLORA_THREADS must be a positive integer, got \"{raw}\"")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Synth { config, out, seed } => {
            let manifest = cmd_synth(config.as_deref(), &out, seed)?;
            println!(
                "wrote {} images ({} train, {} val) to {}",
                manifest.train.len() + manifest.val.len(),
                manifest.train.len(),
                manifest.val.len(),
                out.display()
            );
            println!("class,name,pixels");
            for (i, (name, n)) in manifest.class_names.iter().zip(&manifest.histogram).enumerate() {
                println!("{i},{name},{n}");
            }
        }
        Command::Run {
            config,
            seed,
            out,
            rank,
            mode,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(r) = rank {
                cfg.rank = r;
            }
            if let Some(m) = mode {
                cfg.mode = m.parse::<TrainMode>()?;
            }
            let report = cmd_run(&cfg)?;
            for (range, v) in &report.miou {
                println!("mIoU {range}: {}", fmt_opt(*v));
            }
            println!("forget score: {}", fmt_opt(report.forget_score));
            println!(
                "trainable params (incremental): {} of {} ({:.2}%)",
                report.trainable_params_incremental,
                report.total_params,
                100.0 * report.trainable_fraction_incremental
            );
            println!("netscore: {}", fmt_opt(report.netscore));
            println!("results in {}", cfg.out_dir.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            ranges,
            out,
        } => {
            let ranges = ranges
                .iter()
                .map(|r| r.parse::<ClassRange>())
                .collect::<Result<Vec<_>, _>>()?;
            let report = cmd_eval(&checkpoint, &dataset, &ranges)?;
            for (range, v) in &report.miou {
                println!("mIoU {range}: {}", fmt_opt(*v));
            }
            if let Some(path) = out {
                write_text(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
        }
        Command::Netscore { reports, out } => {
            let rows = cmd_netscore(&reports)?;
            let mut csv = format!("{}\n", NetScoreRow::CSV_HEADER);
            for r in &rows {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            print!("{csv}");
            if let Some(path) = out {
                write_text(&path, &csv)?;
            }
        }
        Command::Pareto { reports, out } => {
            let front = cmd_pareto(&reports)?;
            let mut csv = String::from("label,params_m,miou_all\n");
            for p in &front {
                csv.push_str(&format!("{},{:.6},{:.4}\n", p.label, p.params_m, p.miou));
            }
            print!("{csv}");
            if let Some(path) = out {
                write_text(&path, &csv)?;
            }
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

