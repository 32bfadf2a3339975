//! Minimal deterministic differentiable-computation core: tensors, the layer
//! kinds the enhancer needs, reverse-mode gradients on a tape, and Adam.
//!
//! Everything is generic over [`crate::Real`]: training runs in `f32`, the
//! finite-difference oracle suites run the identical code in `f64`.
//! Determinism contract: identical inputs produce bit-identical forward and
//! backward results. Parallel loops assign each output element to exactly one
//! task and keep every reduction in a fixed order, so results do not depend
//! on thread count.

pub mod adam;
pub mod init;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use init::ParamInit;
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid operation: {0}")]
    InvalidOperation(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
}
