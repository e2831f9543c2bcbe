use rayon::prelude::*;

use super::config::ExperimentConfig;
use crate::data::{to_batch, Dataset, SegmentationSample};
use crate::engine::{
    build_schedule, disagreement_rate, merge_task_predictions, EpochLog, IncrementalState, TaskSchedule,
    TrainMode,
};
use crate::error::{Error, Result};
use crate::metrics::{averaged_params, forget_score, netscore, ClassRange, ConfusionMatrix, MetricsReport, NetScoreInput, ReportUnits};
use crate::nn::{Phase, SegModel};
use crate::scalar::Scalar;

const EVAL_CHUNK: usize = 16;

/// Confusion matrix of `model` over `samples`. Chunks are evaluated in
/// parallel and merged in order, so the result does not depend on the
/// thread count.
pub fn evaluate<S: Scalar>(model: &SegModel<S>, samples: &[&SegmentationSample], classes: usize) -> Result<ConfusionMatrix> {
    let parts: Vec<Result<ConfusionMatrix>> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (images, labels) = to_batch::<S>(chunk)?;
            let pred = model.predict(&images)?;
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(&pred, &labels)?;
            Ok(cm)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(classes);
    for part in parts {
        cm.merge(&part?)?;
    }
    Ok(cm)
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutcome<S> {
    pub report: MetricsReport,
    pub epochs: Vec<EpochLog>,
    pub model: SegModel<S>,
}

/// Runs a whole schedule in memory.
///
/// `primary` is the dataset named by `cfg.dataset`; `step_sets` holds one
/// dataset per step when `cfg.step_datasets` is set and is empty otherwise.
/// Evaluation uses the validation split of every dataset involved.
/// `on_step` sees the model after each step (used for checkpoints).
pub fn run_experiment<S: Scalar>(
    cfg: &ExperimentConfig,
    primary: &Dataset,
    step_sets: &[Dataset],
    mut on_step: impl FnMut(usize, &SegModel<S>) -> Result<()>,
) -> Result<RunOutcome<S>> {
    cfg.validate()?;
    let classes = primary.num_classes();
    let schedule = cfg.schedule_for(classes)?;
    if !step_sets.is_empty() && step_sets.len() != schedule.len() {
        return Err(Error::Config(format!(
            "{} step datasets for {} steps",
            step_sets.len(),
            schedule.len()
        )));
    }
    for d in std::iter::once(primary).chain(step_sets) {
        if d.num_classes() != classes {
            return Err(Error::Data(format!(
                "dataset {} has {} classes, expected {classes}",
                d.root.display(),
                d.num_classes()
            )));
        }
        if d.manifest.spec.image_size != cfg.model.image_size {
            return Err(Error::Config(format!(
                "model.image_size {} does not match dataset image size {}",
                cfg.model.image_size, d.manifest.spec.image_size
            )));
        }
    }
    let mut eval_set: Vec<&SegmentationSample> = primary.val();
    for d in step_sets {
        eval_set.extend(d.val());
    }

    let mut state = IncrementalState::<S>::new(cfg.mode, &schedule, cfg.model.to_spec(classes), cfg.rank, cfg.seed)?;
    let mut epochs = Vec::new();
    let mut trainable = Vec::new();
    let mut step_miou = Vec::new();
    let mut macs: u64 = 0;
    for t in 0..schedule.len() {
        let data = if step_sets.is_empty() { primary } else { &step_sets[t] };
        let train = data.train();
        epochs.extend(state.train_task(&schedule, &train, &cfg.train)?);
        let step_classes = &schedule.steps[t].classes;
        let used = train.iter().filter(|s| s.contains_any(step_classes)).count() as u64;
        let mut per_image = state.model().count_macs(1, Phase::Training);
        if let Some(teacher) = state.teacher() {
            per_image += teacher.count_macs(1, Phase::Forward);
        }
        macs += per_image * used * cfg.train.epochs as u64;
        trainable.push(state.model().count_params(true));
        let cm = evaluate(state.model(), &eval_set, classes)?;
        step_miou.push(cm.miou(&ClassRange::All));
        on_step(t, state.model())?;
    }

    let model = state.into_model();
    let cm = evaluate(&model, &eval_set, classes)?;
    let report = build_report(cfg, &schedule, &model, &cm, &trainable, macs, step_miou)?;
    Ok(RunOutcome { report, epochs, model })
}

fn build_report<S: Scalar>(
    cfg: &ExperimentConfig,
    schedule: &TaskSchedule,
    model: &SegModel<S>,
    cm: &ConfusionMatrix,
    trainable: &[usize],
    macs: u64,
    step_miou_all: Vec<Option<f64>>,
) -> Result<MetricsReport> {
    let miou: Vec<(ClassRange, Option<f64>)> = cfg
        .ranges_for(schedule)
        .into_iter()
        .map(|r| (r, cm.miou(&r)))
        .collect();
    let all = cm.miou(&ClassRange::All);
    let total = model.count_params(false);
    let initial = trainable[0];
    let incremental = trainable.get(1).copied().unwrap_or(initial);
    let params_m = averaged_params(initial, incremental);
    let training_macs_m = macs as f64 / 1e6;
    let score = match all {
        Some(a) if a > 0.0 => Some(netscore(&NetScoreInput::new(a, params_m, training_macs_m))?),
        _ => None,
    };
    Ok(MetricsReport {
        mode: cfg.mode.name().to_string(),
        schedule: cfg.schedule.clone(),
        seed: cfg.seed,
        miou,
        per_class_iou: (0..cm.class_count()).map(|c| cm.iou(c)).collect(),
        step_miou_all,
        forget_score: cfg.jt_reference_miou.zip(all).map(|(jt, a)| forget_score(jt, a)),
        total_params: total,
        trainable_params_initial: initial,
        trainable_params_incremental: incremental,
        trainable_fraction_incremental: incremental as f64 / total as f64,
        params_m,
        training_macs_m,
        netscore: score,
        units: ReportUnits::default(),
        config: serde_json::to_value(cfg)?,
    })
}

/// Outcome of the multi-module conflict experiment.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConflictReport {
    /// Fraction of foreground validation pixels the merged experts get wrong.
    pub expert_disagreement: f64,
    /// Fraction of foreground pixels where more than one expert claims the pixel.
    pub expert_conflict_rate: f64,
    /// Fraction of the same pixels the single sequential CLORA model gets wrong.
    pub single_module_disagreement: f64,
    pub scored_pixels: usize,
}

/// Trains one isolated expert per step (each a fresh LoRA module on the
/// same frozen base, seeing only its own classes), merges their outputs
/// with [`merge_task_predictions`], and compares against one CLORA model
/// trained sequentially on the same schedule.
pub fn conflict_demo(
    dataset: &Dataset,
    schedule_spec: &str,
    base: &ExperimentConfig,
) -> Result<ConflictReport> {
    let classes = dataset.num_classes();
    let schedule = build_schedule(schedule_spec, classes)?;
    let train = dataset.train();
    let val = dataset.val();
    let (images, truth) = to_batch::<f64>(&val)?;

    let mut expert_logits = Vec::with_capacity(schedule.len());
    let mut claims = vec![0u8; truth.len()];
    for step in &schedule.steps {
        let local: Vec<SegmentationSample> = train.iter().map(|s| to_local(s, &step.classes)).collect();
        let local_refs: Vec<&SegmentationSample> = local.iter().collect();
        let n = step.classes.len();
        let own = build_schedule(&format!("{n}-{n}"), n + 1)?;
        let mut st = IncrementalState::<f64>::new(TrainMode::CloraFt, &own, base.model.to_spec(n + 1), base.rank, base.seed)?;
        st.train_task(&own, &local_refs, &base.train)?;
        let pred = st.model().predict(&images)?;
        for (c, &p) in claims.iter_mut().zip(&pred) {
            *c = c.saturating_add(u8::from(p != 0));
        }
        expert_logits.push(st.model().logits(&images)?);
    }
    let merged = merge_task_predictions(&expert_logits)?;

    let mut st = IncrementalState::<f64>::new(TrainMode::Clora, &schedule, base.model.to_spec(classes), base.rank, base.seed)?;
    for _ in 0..schedule.len() {
        st.train_task(&schedule, &train, &base.train)?;
    }
    let single = st.model().predict(&images)?;

    let mask: Vec<bool> = truth.iter().map(|&l| l != 0 && l != crate::data::IGNORE).collect();
    let scored = mask.iter().filter(|&&m| m).count();
    let nothing = || Error::Data("validation split has no foreground pixels".into());
    let conflicts = claims.iter().zip(&mask).filter(|(&c, &m)| m && c > 1).count();
    Ok(ConflictReport {
        expert_disagreement: disagreement_rate(&merged, &truth, &mask).ok_or_else(nothing)?,
        expert_conflict_rate: conflicts as f64 / scored as f64,
        single_module_disagreement: disagreement_rate(&single, &truth, &mask).ok_or_else(nothing)?,
        scored_pixels: scored,
    })
}

/// Relabels a sample into an expert's own class space: `classes[i] → i+1`,
/// everything else background.
fn to_local(s: &SegmentationSample, classes: &[usize]) -> SegmentationSample {
    let mut out = s.clone();
    for l in out.labels.iter_mut() {
        if *l != crate::data::IGNORE {
            *l = classes
                .iter()
                .position(|&c| c == *l as usize)
                .map_or(0, |i| i as u8 + 1);
        }
    }
    out
}

