use serde::{Deserialize, Serialize};

use crate::data::IGNORE;
use crate::error::{Error, Result};

/// Classes introduced at one step and the dataset they come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStep {
    pub classes: Vec<usize>,
    pub dataset: usize,
}

/// Ordered, disjoint class partitions over `1..total_classes`; class 0 is
/// background and belongs to no step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub name: String,
    pub total_classes: usize,
    pub steps: Vec<TaskStep>,
}

impl TaskSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of initial classes (`init` in `init-inc`).
    pub fn initial_count(&self) -> usize {
        self.steps[0].classes.len()
    }

    /// Foreground classes learned before step `t`.
    pub fn seen_before(&self, t: usize) -> Vec<usize> {
        self.steps[..t].iter().flat_map(|s| s.classes.iter().copied()).collect()
    }

    /// Classifier width (background included) after step `t`.
    pub fn width_after(&self, t: usize) -> usize {
        1 + self.steps[..=t].iter().map(|s| s.classes.len()).sum::<usize>()
    }

    /// Assigns a dataset id to each step (for distribution-shift runs).
    pub fn with_datasets(mut self, ids: &[usize]) -> Result<Self> {
        if ids.len() != self.steps.len() {
            return Err(Error::Schedule(format!(
                "{} dataset ids for {} steps",
                ids.len(),
                self.steps.len()
            )));
        }
        for (s, &id) in self.steps.iter_mut().zip(ids) {
            s.dataset = id;
        }
        Ok(self)
    }
}

/// Parses `"init-inc"` and partitions `1..total_classes` into an initial
/// step of `init` classes followed by steps of `inc` classes each.
pub fn build_schedule(spec: &str, total_classes: usize) -> Result<TaskSchedule> {
    let parse = |s: &str| -> Result<usize> {
        s.trim()
            .parse()
            .map_err(|_| Error::Schedule(format!("\"{spec}\" is not of the form init-inc")))
    };
    let (init, inc) = spec
        .split_once('-')
        .ok_or_else(|| Error::Schedule(format!("\"{spec}\" is not of the form init-inc")))?;
    let (init, inc) = (parse(init)?, parse(inc)?);
    if init == 0 || inc == 0 {
        return Err(Error::Schedule(format!("\"{spec}\": init and inc must be at least 1")));
    }
    if total_classes < 2 || init > total_classes - 1 {
        return Err(Error::Schedule(format!(
            "\"{spec}\": {init} initial classes but only {} foreground classes",
            total_classes.saturating_sub(1)
        )));
    }
    let rest = total_classes - 1 - init;
    if rest % inc != 0 {
        return Err(Error::Schedule(format!(
            "\"{spec}\": {rest} remaining classes are not divisible into steps of {inc}"
        )));
    }
    let mut steps = vec![TaskStep {
        classes: (1..=init).collect(),
        dataset: 0,
    }];
    let mut next = init + 1;
    for _ in 0..rest / inc {
        steps.push(TaskStep {
            classes: (next..next + inc).collect(),
            dataset: 0,
        });
        next += inc;
    }
    Ok(TaskSchedule {
        name: spec.trim().to_string(),
        total_classes,
        steps,
    })
}

/// Keeps labels of `current` classes and the ignore value; everything else
/// becomes background.
pub fn remap_labels(labels: &[u8], current: &[usize]) -> Vec<u8> {
    let mut keep = [false; 256];
    for &c in current {
        if c < 256 {
            keep[c] = true;
        }
    }
    labels
        .iter()
        .map(|&l| if l == IGNORE || keep[l as usize] { l } else { 0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn step_counts_for_standard_settings() {
        let s = build_schedule("15-5", 21).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.steps[0].classes, (1..=15).collect::<Vec<_>>());
        assert_eq!(s.steps[1].classes, (16..=20).collect::<Vec<_>>());
        assert_eq!(build_schedule("15-1", 21).unwrap().len(), 6);
        assert_eq!(build_schedule("5-3", 21).unwrap().len(), 6);
        assert_eq!(build_schedule("10-1", 21).unwrap().len(), 11);
        assert_eq!(build_schedule("100-10", 151).unwrap().len(), 6);
    }

    #[test]
    fn widths_follow_steps() {
        let s = build_schedule("5-3", 21).unwrap();
        let w: Vec<usize> = (0..s.len()).map(|t| s.width_after(t)).collect();
        assert_eq!(w, vec![6, 9, 12, 15, 18, 21]);
        assert_eq!(s.seen_before(2), (1..=8).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_specs() {
        for (spec, total) in [("15-4", 21), ("0-1", 6), ("3-0", 6), ("6-1", 6), ("abc", 6), ("3", 6)] {
            assert!(matches!(build_schedule(spec, total), Err(Error::Schedule(_))), "{spec}");
        }
    }

    #[test]
    fn remapping_rules() {
        let cur: Vec<usize> = (16..=20).collect();
        assert_eq!(remap_labels(&[17, 3, 255, 0, 20], &cur), vec![17, 0, 255, 0, 20]);
    }

    proptest! {
        #[test]
        fn schedules_partition_the_foreground(init in 1usize..30, inc in 1usize..8, steps in 0usize..10) {
            let total = 1 + init + inc * steps;
            let s = build_schedule(&format!("{init}-{inc}"), total).unwrap();
            prop_assert_eq!(s.len(), 1 + steps);
            let mut all: Vec<usize> = s.steps.iter().flat_map(|t| t.classes.clone()).collect();
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(all, (1..total).collect::<Vec<_>>());
            for (i, st) in s.steps.iter().enumerate() {
                prop_assert_eq!(st.classes.len(), if i == 0 { init } else { inc });
            }
        }
    }
}
