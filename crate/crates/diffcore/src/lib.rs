//! Minimal dense-tensor numerics with tape-recorded reverse-mode differentiation.
//!
//! Parameters and data live in [`Tensor`] (row-major `f32`). A [`Tape`] records
//! every forward op applied to bound values and replays them in reverse in
//! [`Tape::backward`]. The tape is generic over [`Real`] so the same graph can
//! be evaluated in `f64` when checking gradients against finite differences.

mod error;
pub mod gradcheck;
mod kernels;
mod real;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use real::Real;
pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;
