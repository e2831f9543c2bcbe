use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::losses::{task_ce_loss, unbiased_kd_loss};
use super::schedule::{remap_labels, TaskSchedule};
use crate::data::{batches, to_batch, SegmentationSample, IGNORE};
use crate::error::{Error, Result};
use crate::lora;
use crate::nn::{ModelSpec, SegModel};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Sgd, SgdConfig};

/// Stream ids for per-step shuffling start here (one stream per step).
const SHUFFLE_STREAM_BASE: u64 = 2000;

/// How a run trains across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "CLORA_FT")]
    CloraFt,
    #[serde(rename = "JT")]
    Jt,
    #[serde(rename = "CLORA_JT")]
    CloraJt,
    #[serde(rename = "MIB")]
    Mib,
    #[serde(rename = "MIB_TL")]
    MibTl,
    #[serde(rename = "CLORA")]
    Clora,
    #[serde(rename = "CLORA_REINIT")]
    CloraReinit,
}

impl TrainMode {
    pub const ALL: [TrainMode; 8] = [
        TrainMode::Ft,
        TrainMode::CloraFt,
        TrainMode::Jt,
        TrainMode::CloraJt,
        TrainMode::Mib,
        TrainMode::MibTl,
        TrainMode::Clora,
        TrainMode::CloraReinit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Ft => "FT",
            TrainMode::CloraFt => "CLORA_FT",
            TrainMode::Jt => "JT",
            TrainMode::CloraJt => "CLORA_JT",
            TrainMode::Mib => "MIB",
            TrainMode::MibTl => "MIB_TL",
            TrainMode::Clora => "CLORA",
            TrainMode::CloraReinit => "CLORA_REINIT",
        }
    }

    /// Modes that keep a teacher and use the background-aware losses.
    pub fn uses_distillation(self) -> bool {
        matches!(self, TrainMode::Mib | TrainMode::MibTl | TrainMode::Clora | TrainMode::CloraReinit)
    }

    pub fn uses_lora(self) -> bool {
        matches!(
            self,
            TrainMode::CloraFt | TrainMode::CloraJt | TrainMode::Clora | TrainMode::CloraReinit
        )
    }

    /// Joint modes see every class in one step.
    pub fn is_joint(self) -> bool {
        matches!(self, TrainMode::Jt | TrainMode::CloraJt)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mode \"{s}\"")))
    }
}

/// Which extra loss terms a distillation mode adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossHook {
    /// Unbiased cross-entropy plus unbiased distillation.
    Mib,
    /// Plain cross-entropy only.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kd_weight: f64,
    pub kd_temperature: f64,
    pub loss_hook: LossHook,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kd_weight: 10.0,
            kd_temperature: 1.0,
            loss_hook: LossHook::Mib,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return Err(Error::Config(format!("loss.kd_weight must be non-negative, got {}", self.kd_weight)));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "loss.kd_temperature must be positive, got {}",
                self.kd_temperature
            )));
        }
        Ok(())
    }
}

/// Optimisation hyperparameters shared by every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the first step.
    pub lr_initial: f64,
    /// Learning rate of later steps adding more than `single_class_threshold` classes.
    pub lr_incremental: f64,
    /// Learning rate of later steps adding at most `single_class_threshold` classes.
    pub lr_single_class: f64,
    pub single_class_threshold: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random horizontal flips during training.
    pub hflip: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 6,
            lr_initial: 0.04,
            lr_incremental: 0.01,
            lr_single_class: 0.005,
            single_class_threshold: 1,
            momentum: 0.9,
            weight_decay: 1e-4,
            hflip: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr_initial", self.lr_initial),
            ("lr_incremental", self.lr_incremental),
            ("lr_single_class", self.lr_single_class),
        ] {
            self.sgd(lr)
                .validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        self.loss.validate()
    }

    /// Learning rate for a step adding `added` classes.
    pub fn learning_rate(&self, step: usize, added: usize) -> f64 {
        if step == 0 {
            self.lr_initial
        } else if added <= self.single_class_threshold {
            self.lr_single_class
        } else {
            self.lr_incremental
        }
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub lr: f64,
}

/// Everything carried from one step to the next.
#[derive(Debug, Clone)]
pub struct IncrementalState<S> {
    step: usize,
    mode: TrainMode,
    model: SegModel<S>,
    teacher: Option<SegModel<S>>,
    seen: Vec<usize>,
    seed: u64,
    reinit_cycles: u64,
}

impl<S: Scalar> IncrementalState<S> {
    /// A fresh model sized for the first step of `schedule`. LoRA modes get
    /// their single adapter set here.
    pub fn new(mode: TrainMode, schedule: &TaskSchedule, spec: ModelSpec, rank: usize, seed: u64) -> Result<Self> {
        if mode.is_joint() && schedule.len() != 1 {
            return Err(Error::Config(format!(
                "mode {mode} trains all classes at once but schedule \"{}\" has {} steps",
                schedule.name,
                schedule.len()
            )));
        }
        let spec = ModelSpec {
            num_classes: schedule.width_after(0),
            ..spec
        };
        let mut model = SegModel::new(spec, seed)?;
        if mode.uses_lora() {
            lora::create_adapters(&mut model, rank, seed)?;
        }
        Ok(Self {
            step: 0,
            mode,
            model,
            teacher: None,
            seen: Vec::new(),
            seed,
            reinit_cycles: 0,
        })
    }

    /// Index of the next step to train.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn mode(&self) -> TrainMode {
        self.mode
    }

    pub fn model(&self) -> &SegModel<S> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut SegModel<S> {
        &mut self.model
    }

    pub fn into_model(self) -> SegModel<S> {
        self.model
    }

    pub fn teacher(&self) -> Option<&SegModel<S>> {
        self.teacher.as_ref()
    }

    /// Foreground classes learned in completed steps.
    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn reinit_cycles(&self) -> u64 {
        self.reinit_cycles
    }

    /// Grows the classifier, snapshots the teacher and sets trainability for
    /// step `self.step` without training. `train_task` calls this first.
    pub fn prepare_step(&mut self, schedule: &TaskSchedule) -> Result<()> {
        let t = self.step;
        let step = schedule
            .steps
            .get(t)
            .ok_or_else(|| Error::Config(format!("schedule \"{}\" has no step {t}", schedule.name)))?;
        self.teacher = None;
        if t > 0 {
            if self.mode.uses_distillation() {
                let mut teacher = self.model.clone();
                teacher.set_all_trainable(false);
                self.teacher = Some(teacher);
            }
            let want = schedule.width_after(t);
            if self.model.num_classes() < want {
                self.model.extend_classifier(want - self.model.num_classes())?;
            }
        }
        if self.model.num_classes() != schedule.width_after(t) {
            return Err(Error::Config(format!(
                "model has {} classes but step {t} needs {}",
                self.model.num_classes(),
                schedule.width_after(t)
            )));
        }
        debug_assert!(step.classes.iter().all(|&c| c < self.model.num_classes()));
        self.apply_freezing(t);
        Ok(())
    }

    fn apply_freezing(&mut self, t: usize) {
        match self.mode {
            TrainMode::Ft | TrainMode::Mib | TrainMode::Jt => self.model.set_all_trainable(true),
            TrainMode::MibTl if t == 0 => self.model.set_all_trainable(true),
            TrainMode::MibTl => self.model.freeze_encoder(),
            TrainMode::CloraFt | TrainMode::CloraJt | TrainMode::Clora | TrainMode::CloraReinit => {
                self.model.set_all_trainable(true);
                self.model.freeze_encoder();
            }
        }
    }

    /// Trains step `self.step` on `samples` (full ground truth; labels are
    /// remapped to the step's classes here) and advances to the next step.
    ///
    /// Only samples showing at least one class of the step are used. The
    /// returned log has one entry per epoch.
    pub fn train_task(
        &mut self,
        schedule: &TaskSchedule,
        samples: &[&SegmentationSample],
        cfg: &TrainConfig,
    ) -> Result<Vec<EpochLog>> {
        cfg.validate()?;
        self.prepare_step(schedule)?;
        let t = self.step;
        let classes = schedule.steps[t].classes.clone();
        let data: Vec<SegmentationSample> = samples
            .iter()
            .filter(|s| s.contains_any(&classes))
            .map(|s| {
                let mut s = (*s).clone();
                s.labels = remap_labels(&s.labels, &classes);
                s
            })
            .collect();
        if data.is_empty() {
            return Err(Error::Data(format!("no training sample shows any class of step {t}")));
        }

        let unbiased = self.mode.uses_distillation() && cfg.loss.loss_hook == LossHook::Mib;
        let old: Vec<usize> = if unbiased { self.seen.clone() } else { Vec::new() };
        let lr = cfg.learning_rate(t, classes.len());
        let mut sgd = Sgd::new(cfg.sgd(lr))?;
        let mut rng = SeededRng::with_stream_id(self.seed, SHUFFLE_STREAM_BASE + t as u64);
        let mut log = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            let (mut sum_ce, mut sum_kd, mut n_batches) = (0.0, 0.0, 0usize);
            for idx in batches(data.len(), cfg.batch_size, &mut rng) {
                let flipped: Vec<SegmentationSample>;
                let refs: Vec<&SegmentationSample> = if cfg.hflip {
                    flipped = idx
                        .iter()
                        .map(|&i| if rng.uniform() < 0.5 { data[i].flipped() } else { data[i].clone() })
                        .collect();
                    flipped.iter().collect()
                } else {
                    idx.iter().map(|&i| &data[i]).collect()
                };
                let (images, labels) = to_batch::<S>(&refs)?;

                let teacher_logits = match (&self.teacher, unbiased) {
                    (Some(teacher), true) => Some(teacher.logits(&images)?),
                    _ => None,
                };
                let mut g = Graph::new();
                let logits = self.model.forward_segmentation(&mut g, &images)?;
                let ce = task_ce_loss(&mut g, logits, &labels, &old)?;
                sum_ce += g.scalar(ce).as_f64();
                let loss = match &teacher_logits {
                    Some(tl) => {
                        let valid: Vec<bool> = labels.iter().map(|&l| l != IGNORE).collect();
                        let kd = unbiased_kd_loss(&mut g, logits, tl, &classes, cfg.loss.kd_temperature, Some(&valid))?;
                        sum_kd += g.scalar(kd).as_f64();
                        let kd = g.scale(kd, S::of(cfg.loss.kd_weight));
                        g.add(ce, kd)?
                    }
                    None => ce,
                };
                if !g.scalar(loss).is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at step {t}, epoch {epoch}")));
                }
                g.backward(loss)?;
                for store in self.model.stores_mut() {
                    store.pull_grads(&g)?;
                    if store.iter().any(|(_, p)| p.grad().is_some_and(|gr| gr.iter().any(|v| !v.is_finite()))) {
                        return Err(Error::Numeric(format!("non-finite gradient at step {t}, epoch {epoch}")));
                    }
                }
                sgd.step_trainable(&mut self.model.stores_mut())?;
                n_batches += 1;
            }
            let n = n_batches as f64;
            let ce = sum_ce / n;
            let kd = sum_kd / n;
            log.push(EpochLog {
                step: t,
                epoch,
                loss: ce + cfg.loss.kd_weight * kd,
                ce_loss: ce,
                kd_loss: kd,
                lr,
            });
        }
        if !self.model.params().iter().all(|(_, p)| p.all_finite()) {
            return Err(Error::Numeric(format!("parameters became non-finite during step {t}")));
        }

        if self.mode == TrainMode::CloraReinit {
            self.reinit_cycles += 1;
            lora::reinit(&mut self.model, self.seed, self.reinit_cycles)?;
        }
        self.seen.extend_from_slice(&classes);
        self.step += 1;
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::build_schedule;

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("SGD".parse::<TrainMode>().is_err());
    }

    #[test]
    fn joint_modes_reject_multi_step_schedules() {
        let s = build_schedule("3-1", 6).unwrap();
        for m in [TrainMode::Jt, TrainMode::CloraJt] {
            let err = IncrementalState::<f64>::new(m, &s, ModelSpec::default(), 4, 0).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
        let single = build_schedule("5-5", 6).unwrap();
        assert!(IncrementalState::<f64>::new(TrainMode::Jt, &single, ModelSpec::default(), 4, 0).is_ok());
    }

    #[test]
    fn learning_rate_rule() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate(0, 1), c.lr_initial);
        assert_eq!(c.learning_rate(1, 1), c.lr_single_class);
        assert_eq!(c.learning_rate(1, 2), c.lr_incremental);
    }

    #[test]
    fn loss_config_validation() {
        let bad = LossConfig {
            kd_weight: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            kd_temperature: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clora_first_step_trains_adapters_and_decoder_only() {
        let s = build_schedule("3-1", 6).unwrap();
        let mut st = IncrementalState::<f64>::new(TrainMode::Clora, &s, ModelSpec::default(), 4, 0).unwrap();
        st.prepare_step(&s).unwrap();
        let names = st.model().trainable_names();
        assert!(names.iter().all(|n| n.starts_with("lora.") || n.starts_with("decoder.")));
        assert_eq!(names.len(), 16 + 2);
        assert!(st.teacher().is_none());
    }
}
