use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{build_schedule, TaskSchedule, TrainConfig, TrainMode};
use crate::error::{Error, Result};
use crate::metrics::ClassRange;
use crate::nn::ModelSpec;

/// Network shape; the classifier width comes from the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let d = ModelSpec::default();
        Self {
            image_size: d.image_size,
            patch_size: d.patch_size,
            embed_dim: d.embed_dim,
            num_heads: d.num_heads,
            num_layers: d.num_layers,
            mlp_ratio: d.mlp_ratio,
        }
    }
}

impl ArchConfig {
    pub fn to_spec(self, num_classes: usize) -> ModelSpec {
        ModelSpec {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            mlp_ratio: self.mlp_ratio,
            num_classes,
        }
    }
}

/// Everything that defines a run. Read from JSON; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: TrainMode,
    /// `"init-inc"`.
    pub schedule: String,
    /// Dataset directory produced by `clora synth`.
    pub dataset: PathBuf,
    /// Optional per-step dataset directories (one per step) for runs where
    /// the input distribution shifts between steps.
    #[serde(default)]
    pub step_datasets: Vec<PathBuf>,
    #[serde(default)]
    pub model: ArchConfig,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    /// Where `run` writes its outputs.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// All-class mIoU of the matching joint-training run, used for the
    /// forget score.
    #[serde(default)]
    pub jt_reference_miou: Option<f64>,
    /// Class ranges to report; defaults to the initial classes (with
    /// background), the incremental classes and "All".
    #[serde(default)]
    pub eval_ranges: Vec<ClassRange>,
}

fn default_rank() -> usize {
    8
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    /// A config with every optional field at its default.
    pub fn new(mode: TrainMode, schedule: impl Into<String>, dataset: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            schedule: schedule.into(),
            dataset: dataset.into(),
            step_datasets: Vec::new(),
            model: ArchConfig::default(),
            rank: default_rank(),
            seed: 0,
            train: TrainConfig::default(),
            out_dir: default_out_dir(),
            jt_reference_miou: None,
            eval_ranges: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 && self.mode.uses_lora() {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        self.model.to_spec(2).validate()?;
        self.train.validate()?;
        if let Some(jt) = self.jt_reference_miou {
            if !(0.0..=100.0).contains(&jt) {
                return Err(Error::Config(format!("jt_reference_miou must lie in [0, 100], got {jt}")));
            }
        }
        Ok(())
    }

    pub fn schedule_for(&self, total_classes: usize) -> Result<TaskSchedule> {
        let s = build_schedule(&self.schedule, total_classes)?;
        if self.mode.is_joint() && s.len() != 1 {
            return Err(Error::Config(format!(
                "mode {} trains all classes at once but schedule \"{}\" has {} steps",
                self.mode,
                self.schedule,
                s.len()
            )));
        }
        if self.step_datasets.is_empty() {
            Ok(s)
        } else {
            let ids: Vec<usize> = (0..s.len()).collect();
            s.with_datasets(&ids)
        }
    }

    /// Reported ranges for a schedule.
    pub fn ranges_for(&self, schedule: &TaskSchedule) -> Vec<ClassRange> {
        if !self.eval_ranges.is_empty() {
            return self.eval_ranges.clone();
        }
        let init = schedule.initial_count();
        let mut out = vec![ClassRange::Span(0, init)];
        if init + 1 < schedule.total_classes {
            out.push(ClassRange::Span(init + 1, schedule.total_classes - 1));
        }
        out.push(ClassRange::All);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let ok = r#"{"mode": "CLORA", "schedule": "3-1", "dataset": "d"}"#;
        let cfg: ExperimentConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg, ExperimentConfig::new(TrainMode::Clora, "3-1", "d"));
        let typo = r#"{"mode": "CLORA", "schedule": "3-1", "dataset": "d", "rnak": 4}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(typo).is_err());
        let nested = r#"{"mode": "FT", "schedule": "3-1", "dataset": "d", "train": {"epoch": 2}}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(nested).is_err());
    }

    #[test]
    fn joint_mode_rejects_incremental_schedule() {
        let cfg = ExperimentConfig::new(TrainMode::Jt, "15-5", "d");
        assert!(matches!(cfg.schedule_for(21), Err(Error::Config(_))));
        assert_eq!(cfg.schedule_for(16).unwrap().len(), 1);
    }

    #[test]
    fn default_ranges() {
        let cfg = ExperimentConfig::new(TrainMode::Ft, "15-5", "d");
        let s = cfg.schedule_for(21).unwrap();
        let names: Vec<String> = cfg.ranges_for(&s).iter().map(ToString::to_string).collect();
        assert_eq!(names, ["0-15", "16-20", "All"]);
    }
}
