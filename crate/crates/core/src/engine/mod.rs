//! The class-incremental protocol: schedules, losses, training modes and
//! the multi-module prediction merge.

mod losses;
mod merge;
mod schedule;
mod train;

pub use losses::{task_ce_loss, unbiased_kd_loss};
pub use merge::{disagreement_rate, merge_task_predictions};
pub use schedule::{build_schedule, remap_labels, TaskSchedule, TaskStep};
pub use train::{EpochLog, IncrementalState, LossConfig, LossHook, TrainConfig, TrainMode};
