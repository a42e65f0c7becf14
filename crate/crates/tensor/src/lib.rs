//! Dense tensors with a reverse-mode gradient tape.
//!
//! [`Tensor`] is plain row-major data. Differentiable computation happens on
//! [`Var`] handles owned by a [`Tape`]; [`Tape::backward`] replays the
//! recorded operations in reverse and returns [`Gradients`]. The [`nn`]
//! module holds parameter storage and the convolutional blocks built on top.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::Conv2dSpec;
pub use ops::Resample;
pub use scalar::Real;
pub use tape::{Gradients, LinearMap, Tape, Var};
pub use tensor::Tensor;
