//! Segmentation and efficiency metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::IGNORE;
use crate::error::{Error, Result};

/// Per-class confusion counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::dim("confusion_matrix", &[counts.len()], &[classes, classes]));
        }
        Ok(Self { classes, counts })
    }

    pub fn class_count(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not the ignore label.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dim("accumulate", &[pred.len()], &[truth.len()]));
        }
        let c = self.classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE {
                continue;
            }
            for id in [t, p] {
                if id as usize >= c {
                    return Err(Error::Data(format!("class id {id} outside {c} classes")));
                }
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != IGNORE {
                self.counts[t as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("merge", &[self.classes], &[other.classes]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// IoU of one class, `None` when it appears in neither truth nor prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let c = self.classes;
        let tp = self.get(class, class);
        let row: u64 = (0..c).map(|j| self.get(class, j)).sum();
        let col: u64 = (0..c).map(|i| self.get(i, class)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU in percent over `classes`, skipping zero-union classes.
    /// `None` when every class in the range is absent.
    pub fn miou(&self, classes: &ClassRange) -> Option<f64> {
        let ious: Vec<f64> = classes
            .ids(self.classes)
            .filter_map(|c| self.iou(c))
            .collect();
        (!ious.is_empty()).then(|| 100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// A contiguous range of class ids, or every class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ClassRange {
    All,
    Span(usize, usize),
}

impl ClassRange {
    /// Ids covered, clipped to `classes`.
    pub fn ids(&self, classes: usize) -> std::ops::Range<usize> {
        match *self {
            ClassRange::All => 0..classes,
            ClassRange::Span(lo, hi) => lo.min(classes)..(hi + 1).min(classes),
        }
    }
}

impl fmt::Display for ClassRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassRange::All => f.write_str("All"),
            ClassRange::Span(lo, hi) => write!(f, "{lo}-{hi}"),
        }
    }
}

impl FromStr for ClassRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(ClassRange::All);
        }
        let bad = || Error::Config(format!("\"{s}\" is not a class range like 0-15 or All"));
        let (lo, hi) = match s.split_once('-') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let v = s.trim().parse().map_err(|_| bad())?;
                (v, v)
            }
        };
        if lo > hi {
            return Err(bad());
        }
        Ok(ClassRange::Span(lo, hi))
    }
}

impl TryFrom<String> for ClassRange {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ClassRange> for String {
    fn from(r: ClassRange) -> String {
        r.to_string()
    }
}

/// Retention deficit against joint training.
pub fn forget_score(jt_miou_all: f64, method_miou_all: f64) -> f64 {
    jt_miou_all - method_miou_all
}

/// Inputs of the NetScore with the usual exponents as defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetScoreInput {
    /// Final all-class mIoU in percent.
    pub accuracy: f64,
    /// Parameters in millions.
    pub params_m: f64,
    /// Training MACs in millions.
    pub macs_m: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl NetScoreInput {
    pub fn new(accuracy: f64, params_m: f64, macs_m: f64) -> Self {
        Self {
            accuracy,
            params_m,
            macs_m,
            alpha: 2.0,
            beta: 0.5,
            gamma: 0.5,
        }
    }
}

/// `20·log10(a^α / (p^β · m^γ))`.
pub fn netscore(input: &NetScoreInput) -> Result<f64> {
    let NetScoreInput {
        accuracy: a,
        params_m: p,
        macs_m: m,
        alpha,
        beta,
        gamma,
    } = *input;
    if !(p > 0.0 && m > 0.0) {
        return Err(Error::Contract(format!("netscore needs positive params and MACs, got {p} and {m}")));
    }
    if !(a > 0.0 && a <= 100.0) {
        return Err(Error::Contract(format!("netscore accuracy must lie in (0, 100], got {a}")));
    }
    Ok(20.0 * (alpha * a.log10() - beta * p.log10() - gamma * m.log10()))
}

/// Mean of the initial-step and incremental-step trainable counts, in millions.
pub fn averaged_params(initial_step_params: usize, incremental_step_params: usize) -> f64 {
    (initial_step_params as f64 + incremental_step_params as f64) / 2.0 / 1e6
}

/// One candidate on the cost/accuracy plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub params_m: f64,
    pub miou: f64,
    pub label: String,
}

fn dominates(y: &ParetoPoint, x: &ParetoPoint) -> bool {
    y.params_m <= x.params_m && y.miou >= x.miou && (y.params_m < x.params_m || y.miou > x.miou)
}

/// Non-dominated points (fewer parameters and higher mIoU are better),
/// sorted by parameters then descending mIoU.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .params_m
            .total_cmp(&points[b].params_m)
            .then(points[b].miou.total_cmp(&points[a].miou))
            .then(a.cmp(&b))
    });
    // Sweep by ascending cost: a point survives iff its mIoU beats every
    // cheaper point, or ties the best point of exactly its own cost.
    let mut front: Vec<ParetoPoint> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut best_params = f64::NAN;
    for i in order {
        let p = &points[i];
        if p.miou > best || (p.miou == best && p.params_m == best_params) {
            if p.miou > best {
                best = p.miou;
                best_params = p.params_m;
            }
            front.push(p.clone());
        }
    }
    debug_assert!(front.iter().all(|x| !points.iter().any(|y| dominates(y, x))));
    front
}

/// Results of one run as written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub schedule: String,
    pub seed: u64,
    /// `(range, mIoU %)`; `None` when no class of the range was present.
    pub miou: Vec<(ClassRange, Option<f64>)>,
    pub per_class_iou: Vec<Option<f64>>,
    /// All-class mIoU on the evaluation split after each step.
    pub step_miou_all: Vec<Option<f64>>,
    /// Forget score on the "All" range; needs a joint-training reference.
    pub forget_score: Option<f64>,
    pub total_params: usize,
    pub trainable_params_initial: usize,
    pub trainable_params_incremental: usize,
    pub trainable_fraction_incremental: f64,
    /// Averaged trainable parameters, millions.
    pub params_m: f64,
    /// Total training MACs over all steps, millions.
    pub training_macs_m: f64,
    pub netscore: Option<f64>,
    pub units: ReportUnits,
    /// Effective configuration, echoed for reproducibility.
    pub config: serde_json::Value,
}

/// Unit labels stored with every report because NetScore depends on them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportUnits {
    pub accuracy: String,
    pub params: String,
    pub macs: String,
}

impl Default for ReportUnits {
    fn default() -> Self {
        Self {
            accuracy: "percent".into(),
            params: "millions (mean of initial and incremental trainable)".into(),
            macs: "millions (total training MACs, all steps)".into(),
        }
    }
}

impl MetricsReport {
    pub fn miou_for(&self, range: &ClassRange) -> Option<f64> {
        self.miou.iter().find(|(r, _)| r == range).and_then(|(_, v)| *v)
    }

    /// Column order of [`MetricsReport::csv_row`].
    pub const CSV_HEADER: &'static str = "mode,schedule,seed,miou_ranges,miou_all,forget_score,total_params,\
trainable_params_initial,trainable_params_incremental,trainable_fraction_incremental,params_m,training_macs_m,netscore";

    /// One CSV line (no trailing newline). Per-range values are packed as
    /// `range=value` pairs separated by `;` in the `miou_ranges` column.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let ranges = self
            .miou
            .iter()
            .map(|(r, v)| format!("{r}={}", opt(*v)))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.3},{}",
            self.mode,
            self.schedule,
            self.seed,
            ranges,
            opt(self.miou_for(&ClassRange::All)),
            opt(self.forget_score),
            self.total_params,
            self.trainable_params_initial,
            self.trainable_params_incremental,
            self.trainable_fraction_incremental,
            self.params_m,
            self.training_macs_m,
            opt(self.netscore),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_matrix() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
        assert!((cm.iou(0).unwrap() - 0.6).abs() < 1e-15);
        assert!((cm.miou(&ClassRange::All).unwrap() - 60.0).abs() < 1e-12);
    }

    #[test]
    fn accumulate_rules() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(cm.total(), 3);
        assert!((0..3).all(|i| (0..3).all(|j| (cm.get(i, j) > 0) == (i == j))));
        let before = cm.clone();
        cm.accumulate(&[1, 2], &[255, 255]).unwrap();
        assert_eq!(cm, before);
        assert_eq!(cm.miou(&ClassRange::All), Some(100.0));
        match cm.accumulate(&[7], &[0]) {
            Err(Error::Data(msg)) => assert!(msg.contains('7')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 0, 1], &[0, 1, 1]).unwrap();
        // class 2 never appears: mean of IoU(0)=1/2 and IoU(1)=1/2
        assert!((cm.miou(&ClassRange::All).unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(cm.miou(&ClassRange::Span(2, 2)), None);
    }

    #[test]
    fn ranges_parse() {
        assert_eq!("0-15".parse::<ClassRange>().unwrap(), ClassRange::Span(0, 15));
        assert_eq!("All".parse::<ClassRange>().unwrap(), ClassRange::All);
        assert_eq!("4".parse::<ClassRange>().unwrap(), ClassRange::Span(4, 4));
        assert!("5-2".parse::<ClassRange>().is_err());
        assert_eq!(ClassRange::Span(16, 20).to_string(), "16-20");
    }

    #[test]
    fn forget_scores() {
        assert!((forget_score(81.69, 14.12) - 67.57).abs() < 1e-9);
        assert!((forget_score(81.69, 70.91) - 10.78).abs() < 1e-9);
        assert_eq!(forget_score(81.69, 81.69), 0.0);
    }

    #[test]
    fn netscore_examples() {
        assert_eq!(netscore(&NetScoreInput::new(1.0, 1.0, 1.0)).unwrap(), 0.0);
        let v = netscore(&NetScoreInput::new(81.69, 100.0, 1000.0)).unwrap();
        let oracle = 20.0 * (81.69f64 * 81.69 / (10.0 * 1000f64.sqrt())).log10();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 26.487).abs() < 1e-3);
        let doubled = netscore(&NetScoreInput::new(2.0 * 40.0, 5.0, 7.0)).unwrap()
            - netscore(&NetScoreInput::new(40.0, 5.0, 7.0)).unwrap();
        assert!((doubled - 20.0 * 4f64.log10()).abs() < 1e-12);
        assert!(netscore(&NetScoreInput::new(50.0, 0.0, 1.0)).is_err());
        assert!(netscore(&NetScoreInput::new(50.0, 1.0, -1.0)).is_err());
    }

    #[test]
    fn averaged() {
        assert_eq!(averaged_params(100_000_000, 2_000_000), 51.0);
        assert_eq!(averaged_params(3_000_000, 3_000_000), 3.0);
    }

    fn pt(p: f64, m: f64) -> ParetoPoint {
        ParetoPoint {
            params_m: p,
            miou: m,
            label: String::new(),
        }
    }

    #[test]
    fn pareto_examples() {
        let f = pareto_front(&[pt(1.0, 50.0), pt(2.0, 60.0), pt(3.0, 55.0)]);
        assert_eq!(f, vec![pt(1.0, 50.0), pt(2.0, 60.0)]);
        assert_eq!(pareto_front(&[pt(4.0, 1.0)]), vec![pt(4.0, 1.0)]);
    }

    fn arb_matrix() -> impl Strategy<Value = (usize, Vec<u8>, Vec<u8>)> {
        (2usize..6).prop_flat_map(|c| {
            let lab = prop::collection::vec(0..c as u8, 64);
            (Just(c), lab.clone(), lab)
        })
    }

    proptest! {
        #[test]
        fn accumulate_matches_pixel_oracle_and_is_additive((c, p, t) in arb_matrix(), cut in 0usize..64) {
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&p, &t).unwrap();
            for i in 0..c {
                for j in 0..c {
                    let n = p.iter().zip(&t).filter(|(&a, &b)| b as usize == i && a as usize == j).count();
                    prop_assert_eq!(cm.get(i, j), n as u64);
                }
            }
            let mut a = ConfusionMatrix::new(c);
            a.accumulate(&p[..cut], &t[..cut]).unwrap();
            let mut b = ConfusionMatrix::new(c);
            b.accumulate(&p[cut..], &t[cut..]).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(a, cm);
        }

        #[test]
        fn miou_bounded_and_permutation_invariant((c, p, t) in arb_matrix(), seed in any::<u64>()) {
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&p, &t).unwrap();
            let m = cm.miou(&ClassRange::All).unwrap();
            prop_assert!((0.0..=100.0).contains(&m));
            let mut perm: Vec<u8> = (0..c as u8).collect();
            let mut rng = crate::rng::SeededRng::new(seed, crate::rng::Stream::Shuffle);
            rng.shuffle(&mut perm);
            let pp: Vec<u8> = p.iter().map(|&v| perm[v as usize]).collect();
            let tp: Vec<u8> = t.iter().map(|&v| perm[v as usize]).collect();
            let mut cp = ConfusionMatrix::new(c);
            cp.accumulate(&pp, &tp).unwrap();
            for k in 0..c {
                prop_assert_eq!(cm.iou(k), cp.iou(perm[k] as usize));
            }
            prop_assert!((cp.miou(&ClassRange::All).unwrap() - m).abs() < 1e-9);
        }

        #[test]
        fn netscore_monotone(a in 1.0f64..99.0, p in 0.01f64..100.0, m in 0.01f64..1e4) {
            let base = netscore(&NetScoreInput::new(a, p, m)).unwrap();
            prop_assert!(netscore(&NetScoreInput::new(a + 0.5, p, m)).unwrap() > base);
            prop_assert!(netscore(&NetScoreInput::new(a, p * 1.5, m)).unwrap() < base);
            prop_assert!(netscore(&NetScoreInput::new(a, p, m * 1.5)).unwrap() < base);
        }

        #[test]
        fn pareto_matches_dominance_oracle(raw in prop::collection::vec((0u8..10, 0u8..10), 1..40)) {
            let pts: Vec<ParetoPoint> = raw.iter().map(|&(p, m)| pt(p as f64, m as f64)).collect();
            let front = pareto_front(&pts);
            for x in &front {
                prop_assert!(!pts.iter().any(|y| dominates(y, x)));
            }
            for x in &pts {
                if !front.contains(x) {
                    prop_assert!(front.iter().any(|y| dominates(y, x)));
                }
            }
            let oracle: Vec<&ParetoPoint> = pts.iter().filter(|x| !pts.iter().any(|y| dominates(y, x))).collect();
            prop_assert_eq!(front.len(), oracle.len());
        }
    }
}
