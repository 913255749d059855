//! Dense row-major tensors with a define-by-run reverse-mode tape.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] and addressed through lightweight [`Var`] handles. Everything is
//! generic over [`Real`] so the same graph code runs in `f32` for training and
//! in `f64` for finite-difference verification.

mod error;
mod geometry;
pub mod gradcheck;
mod kernels;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use geometry::PatchGeometry;
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
