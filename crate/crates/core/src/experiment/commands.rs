use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::{evaluate, run_experiment};
use crate::data::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::synth::{generate, SynthSpec};
use crate::data::{Dataset, Manifest};
use crate::error::{Error, Result};
use crate::metrics::{netscore, pareto_front, ClassRange, ConfusionMatrix, MetricsReport, NetScoreInput, ParetoPoint};
use crate::nn::SegModel;

/// JSON schema of [`ExperimentConfig`].
pub const CONFIG_SCHEMA: &str = include_str!("../../schema/experiment-config.schema.json");

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates a dataset from a spec file (or the default spec).
pub fn cmd_synth(spec_file: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> Result<Manifest> {
    let mut spec = match spec_file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    generate(&spec, out_dir)
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Vec<Dataset>)> {
    let primary = Dataset::load(&cfg.dataset)?;
    let steps = cfg
        .step_datasets
        .iter()
        .map(|p| Dataset::load(p))
        .collect::<Result<Vec<_>>>()?;
    Ok((primary, steps))
}

/// Runs an experiment and writes `report.json`, `report.csv`,
/// `steps.jsonl` and `checkpoints/step_<t>.clra` under `cfg.out_dir`.
/// Wall-clock times go to `run.log` only, so every other file is a pure
/// function of the config.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let (primary, steps) = load_datasets(cfg)?;
    let out = &cfg.out_dir;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let log_path = out.join("run.log");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let stamp = || SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let mut note = |msg: String| -> Result<()> {
        writeln!(log, "{:.3} {msg}", stamp()).map_err(|e| Error::io(&log_path, e))
    };
    note(format!("start mode={} schedule={} seed={}", cfg.mode, cfg.schedule, cfg.seed))?;

    let outcome = run_experiment::<f64>(cfg, &primary, &steps, |t, model| {
        save_checkpoint(model, &ckpt_dir.join(format!("step_{t}.clra")))?;
        note(format!("finished step {t}"))
    })?;

    let mut jsonl = String::new();
    for e in &outcome.epochs {
        jsonl.push_str(&serde_json::to_string(e)?);
        jsonl.push('\n');
    }
    write(&out.join("steps.jsonl"), jsonl)?;
    write(&out.join("report.json"), serde_json::to_string_pretty(&outcome.report)? + "\n")?;
    write(
        &out.join("report.csv"),
        format!("{}\n{}\n", MetricsReport::CSV_HEADER, outcome.report.csv_row()),
    )?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{:.3} done", stamp()).map_err(|e| Error::io(&log_path, e))?;
    Ok(outcome.report)
}

/// Scores of one checkpoint on a dataset's validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub miou: Vec<(ClassRange, Option<f64>)>,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path, ranges: &[ClassRange]) -> Result<EvalReport> {
    let model: SegModel<f64> = load_checkpoint(checkpoint)?;
    let data = Dataset::load(dataset)?;
    if model.num_classes() > data.num_classes() {
        return Err(Error::Data(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            model.num_classes(),
            data.num_classes()
        )));
    }
    let cm = evaluate(&model, &data.val(), data.num_classes())?;
    let ranges = if ranges.is_empty() { vec![ClassRange::All] } else { ranges.to_vec() };
    Ok(EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        dataset: dataset.to_path_buf(),
        miou: ranges.iter().map(|r| (*r, cm.miou(r))).collect(),
        per_class_iou: (0..cm.class_count()).map(|c| cm.iou(c)).collect(),
        confusion: cm,
    })
}

fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn label(r: &MetricsReport) -> String {
    format!("{}/{}/seed{}", r.mode, r.schedule, r.seed)
}

fn final_miou(path: &Path, r: &MetricsReport) -> Result<f64> {
    r.miou_for(&ClassRange::All)
        .ok_or_else(|| Error::Data(format!("{}: report has no All-range mIoU", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetScoreRow {
    pub label: String,
    pub miou_all: f64,
    pub params_m: f64,
    pub macs_m: f64,
    pub netscore: f64,
}

impl NetScoreRow {
    pub const CSV_HEADER: &'static str = "label,miou_all,params_m,macs_m,netscore";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.6},{:.3},{:.4}",
            self.label, self.miou_all, self.params_m, self.macs_m, self.netscore
        )
    }
}

/// NetScore of every report, highest first. Reports must agree on units.
pub fn cmd_netscore(reports: &[PathBuf]) -> Result<Vec<NetScoreRow>> {
    let mut rows = Vec::with_capacity(reports.len());
    let mut units = None;
    for path in reports {
        let r = load_report(path)?;
        match &units {
            None => units = Some(r.units.clone()),
            Some(u) if *u != r.units => {
                return Err(Error::Data(format!(
                    "{}: unit mismatch ({:?} vs {:?})",
                    path.display(),
                    r.units,
                    u
                )))
            }
            Some(_) => {}
        }
        let a = final_miou(path, &r)?;
        rows.push(NetScoreRow {
            label: label(&r),
            miou_all: a,
            params_m: r.params_m,
            macs_m: r.training_macs_m,
            netscore: netscore(&NetScoreInput::new(a, r.params_m, r.training_macs_m))?,
        });
    }
    rows.sort_by(|a, b| b.netscore.total_cmp(&a.netscore));
    Ok(rows)
}

/// Pareto front of all-class mIoU against averaged trainable parameters.
pub fn cmd_pareto(reports: &[PathBuf]) -> Result<Vec<ParetoPoint>> {
    let points = reports
        .iter()
        .map(|p| {
            let r = load_report(p)?;
            Ok(ParetoPoint {
                params_m: r.params_m,
                miou: final_miou(p, &r)?,
                label: label(&r),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pareto_front(&points))
}
