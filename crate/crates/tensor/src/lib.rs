//! Minimal dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Build a [`Tape`] per forward pass, bind parameters from a [`ParamStore`],
//! apply primitives, then call [`Tape::backward`] on a scalar loss. Every
//! primitive's backward rule is checked against central differences in
//! `tests/primitives.rs` using the [`gradcheck`] helpers.

pub mod error;
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::Adam;
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{BatchMoments, Gradients, Mode, NormStats, Tape, Var, BATCHNORM_EPS};
pub use tensor::Tensor;

/// Slope used for every leaky ReLU in the models.
pub const LEAKY_SLOPE: f64 = 0.2;
