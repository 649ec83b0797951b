//! A small dense-tensor engine with reverse-mode differentiation.
//!
//! Everything is fp64. Operations are recorded on a [`Tape`] as they run;
//! [`Tape::backward`] walks the record in reverse from a scalar root and
//! returns gradients for trainable leaves. Broadcasting is limited to
//! adding a row vector to every row of a matrix.

mod check;
mod tape;
mod tensor;

pub use check::{check_gradients, GradCheck};
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GradError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}
