//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] and addressed through [`Var`] handles. Only the ops needed by
//! cross-attention models and multi-label losses are provided. There is no
//! broadcasting beyond scalar-times-tensor: use [`Tape::repeat`] and
//! [`Tape::reshape`] explicitly.

mod error;
pub mod gradcheck;
mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use scalar::Scalar;
pub use tape::{sigmoid, Tape, Var, SIGMOID_EPS};
pub use tensor::Tensor;
