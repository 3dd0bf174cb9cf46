//! Minimal layer library with hand-written backward passes.
//!
//! Activations are `ArrayD` tensors shaped `[N, C, H, W]` (spatial) or
//! `[N, F]` (flat). Layers are immutable during both forward and backward;
//! parameter gradients are written into caller-owned buffers so that a model
//! can be shared while gradients are computed (feature visualization needs
//! input gradients from an otherwise untouched model).

mod conv;
mod layers;
mod sequential;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use conv::Conv2d;
pub use layers::{Cache, Layer, Linear, ResidualBlock};
pub use sequential::{Sequential, SequentialCache};

/// Floating-point element type of a network (`f32` for production, `f64`
/// for gradient checking).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
