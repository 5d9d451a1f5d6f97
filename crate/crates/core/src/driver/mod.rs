//! The continual-learning loop.

mod config;
mod experiment;
mod objective;
mod state;
mod train;

pub use config::{Fold, RunConfig};
pub use experiment::{
    build_network, compare_methods, continue_sequence, run_continual, write_metrics_csv, ContinualReport, Learner, MetricsRow, TaskSequence, CSV_HEADER,
};
pub use objective::{estimation_batches, raw_affine, rebuild_penalty, Method, NormAnchor, Penalty, PenaltyEval, SeparatePenalty};
pub use state::{select_model, AlphaController, AlphaPhase, ContinualState, GridRun, Sgd};
pub use train::{accuracy, finish_task, learn_task, measure_ct, renorm_limits, train_task, EpochStats, Hooks, StepTrace, Task, TaskResult, TrainOutcome};
