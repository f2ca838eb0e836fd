//! Minimal reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! The trainer and the adversarial-climbing refiner need exact gradients
//! of compositions of a handful of operations (convolution, GAP, linear
//! heads, feature masking, map normalization, the losses). Rather than a
//! general framework, [`Tape`] records exactly those operations eagerly
//! and replays them backwards. Everything is generic over [`Elem`] so the
//! same code runs at 32-bit for training and at 64-bit for gradient
//! oracle checks.

mod raw;
mod tape;

pub use raw::{
    bilinear_upsample, bilinear_upsample_backward, col2im, conv2d, conv2d_backward, conv_out_dim,
    gap, im2col, log_softmax, max_normalize, sigmoid, softmax,
};
pub use tape::{Gradients, Tape, Var};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Scalar element: `f32` for training, `f64` for oracle-grade checks.
pub trait Elem:
    Float
    + ScalarOperand
    + LinalgScalar
    + std::ops::AddAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
