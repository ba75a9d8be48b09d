//! Minimal reverse-mode automatic differentiation engine.
//!
//! Provides exactly the tensor operations a graph-transformer GAN forward
//! pass needs (dense matmul, 3x3/4x4 convolutions and their adjoints,
//! attention softmax, GeLU, and the loss primitives) on a Wengert tape
//! whose backward pass is itself differentiable. Scalar type is generic
//! ([`Scalar`], implemented for `f32`/`f64`); the canonical instantiation
//! is `f64` via the aliases below, where finite-difference verification is
//! meaningful.

mod error;
mod gradcheck;
mod kernels;
mod optim;
mod params;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, CoordSelection, GradCheckOpts, GradCheckReport};
pub use optim::Adam;
pub use params::{load_checkpoint, save_checkpoint, Bound, ParamStore, CHECKPOINT_VERSION};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Canonical 64-bit instantiations used by the layout pipeline.
pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type Adam64 = Adam<f64>;
