//! Minimal reverse-mode autodiff: dense tensors, an op tape, Adam, and
//! finite-difference gradient verification.
//!
//! Training runs in `Real` (f32); gradient checks instantiate the same
//! generic code at f64, where the pinned step size is meaningful.

pub mod adam;
pub mod gradcheck;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use scalar::{Real, Scalar};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
