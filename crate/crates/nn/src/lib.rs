//! Differentiable kernels and the Siamese change-segmentation network.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod scalar;
pub mod tape;
pub mod train;

pub use model::{ArchConfig, AttentionConfig, Mechanism, Model};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use train::TrainConfig;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}
