//! Floating-point scalar abstraction for the tensor core.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! kernels, tape, and networks run in `f32` or `f64`. The trainer and CLI use
//! the `f64` aliases exported from the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type of tensors: a real float with the usual assign ops and
/// conversions. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Debug + Display + Default + 'static
{
    /// Lossless-enough conversion from `f64` for constants baked into ops
    /// (activation slopes, numeric-stability epsilons, ...).
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    /// Widening conversion used by metrics and reporting.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
