//! Synthetic plan-then-answer task, training loop and algorithm comparison.

pub mod compare;
pub mod config;
pub mod task;
pub mod train;

pub use compare::{compare, CompareResult, CurvePoint, SummaryRow};
pub use config::{CompareConfig, OptimizerConfig, OptimizerKind, RunConfig, TaskConfig, TrainConfig};
pub use task::{make_task, ScoredTokens, ToyTask, Vocab};
pub use train::{read_curve_csv, train, train_from, write_curve_csv, CurveRecord, RunManifest, TrainRun};
