//! Audio adapters for a small conditional diffusion transformer that
//! generates beat-synchronized 2D dance motion.
//!
//! The crate is layered bottom-up:
//!
//! * [`numerics`]: tensors, reverse-mode gradients, finite-difference checks.
//! * [`diffusion`]: denoiser training loss, probability-flow sampling with
//!   classifier-free guidance, and the Beta-to-Uniform noise schedule.
//! * [`adapters`]: zero-initialized cross-attention and low-rank adapters.
//! * [`model`]: the frame-token diffusion transformer.
//! * [`data`]: synthetic beat tracks, dances, captions and the dataset format.
//! * [`training`]: base pre-training, adapter training, checkpoints.
//! * [`probe`]: per-layer adaptability scoring and layer selection.
//! * [`eval`]: beat alignment, diversity, prior drift and tempo response.

pub mod adapters;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod training;

pub use numerics::{NumericsError, Real, Rng, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("frozen base weights changed: {0}")]
    FrozenViolation(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
