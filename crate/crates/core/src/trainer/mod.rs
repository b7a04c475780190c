//! Training, evaluation and checkpoint persistence.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{DataSpec, LossKind, PredictorSpec, TabularMode, TrainConfig};
pub use data::Dataset;
pub use eval::{evaluate_bpc, evaluate_bpc_with, exact_bpc_with, BpcReport};
pub use train::{train, StepMetrics, Trainer};
