//! Scalar abstraction shared by the signal chain, the FLM and the classifier.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};
use rustfft::FftNum;

/// Real floating-point scalar: `f32` for throughput, `f64` for gradient checks
/// and reference computations.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + FftNum
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; constants and config values go through here.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::of(v as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
