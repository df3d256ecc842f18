//! Training, checkpointing, export and evaluation.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod experiments;
pub mod optim;
pub mod strip;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{OptimizerConfig, OptimizerKind, TrainConfig, TrainVariant};
pub use evaluate::{evaluate, evaluate_on};
pub use strip::strip_eam;
pub use trainer::{train, train_on, training_pools, LogRow, TrainOutput};
