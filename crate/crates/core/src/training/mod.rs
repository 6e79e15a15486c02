//! Class-incremental training: task streams, annealing schedules,
//! masked cross-entropy, replay, and the per-task SGD cycle.

mod cycle;
mod loss;
mod replay;
mod schedule;
mod stream;

pub use cycle::{
    run_continual, run_task_cycle, sgd_step, BatchStats, ContinualOutcome, CycleObserver,
    CycleRng, EpochStats, NoopObserver, TaskReport, TrainConfig,
};
pub use loss::{cross_entropy, mask_unseen};
pub use replay::{ReplayBuffer, ReplayItem};
pub use schedule::{lr_schedule, tau_schedule};
pub use stream::{Dataset, TaskData, TaskStream};
