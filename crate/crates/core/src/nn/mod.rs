//! Minimal differentiable numeric kernel.
//!
//! Everything the forecasting model needs and nothing more: a dense row-major
//! [`Tensor`], a reverse-mode [`Tape`] over a fixed set of primitives (causal
//! convolution, ReLU/tanh/softmax, length-preserving max-pool, weight-normalized
//! dense layers, dropout, matmul/concat/flatten), and a finite-difference
//! [`grad_check`] oracle used to verify every gradient path.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_FD_STEP};
pub use tape::{DropoutMode, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
///
/// Non-finite values never propagate: any op whose output contains a NaN or
/// infinity fails with [`NnError::NonFinite`] instead of returning the tensor.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type NnResult<T> = Result<T, NnError>;
