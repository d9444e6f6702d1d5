//! Dense tensors, reverse-mode gradients and finite-difference checking.

mod compose;
pub mod gradcheck;
mod real;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use real::{DType, Real};
pub use rng::{Rng, RngState};
pub use tape::{evaluate_with_gradients, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: non-finite value produced{}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
    NonFinite { op: &'static str, node: Option<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, NumericsError>;
