//! Dense linear algebra, differentiable layer primitives with analytic
//! gradients, losses, optimizers and checkpointing.
//!
//! Everything is double precision. There is no graph-compiled autodiff:
//! each layer ships a hand-derived backward whose correctness is pinned by
//! finite-difference tests.

mod checkpoint;
mod dropout;
mod layers;
mod loss;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint, LoadedState};
pub use dropout::{dropout_backward, dropout_forward, DropoutMask, DropoutMode};
pub use layers::{
    gru_backward, gru_forward, gru_forward_into, linear_backward, linear_forward, sigmoid,
    sigmoid_grad_from_output, sigmoid_vec, tanh_grad_from_output, tanh_vec, GruGradAccum, GruTape,
    GruWeights,
};
pub use loss::{bce_loss, mse_loss, BCE_CLAMP};
pub use optim::{effective_learning_rate, optimizer_step, OptimizerConfig, OptimizerKind};
pub use params::{OptState, ParamId, ParameterSet};
pub(crate) use tensor::axpy;
pub use tensor::Tensor2;

use thiserror::Error;

/// Errors raised by numeric primitives.
#[derive(Debug, Error)]
pub enum NumericError {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    DimensionMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("non-finite value produced in {stage}")]
    NonFinite { stage: &'static str },
    #[error("target not in {{0,1}} at index {index}: {value}")]
    NonBinaryTarget { index: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("optimizer state mismatch for parameter {0}")]
    StateMismatch(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumericError>;
