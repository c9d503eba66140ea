//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; trainable values live in a [`ParamStore`].
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass and replays it backwards to produce [`Gradients`].
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Training runs in
//! 32-bit; finite-difference verification runs in 64-bit.

mod checkpoint;
mod error;
mod gradcheck;
mod kernels;
mod optim;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointEntry, Manifest};
pub use error::{Result, TensorError};
pub use gradcheck::{check_loss, finite_diff_check, CheckOptions, GradCheckReport, ParamCheck};
pub use optim::{AdamW, AdamWConfig};
pub use param::{Param, ParamGrads, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{CeReduction, CeStats, Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
