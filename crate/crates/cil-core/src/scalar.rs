//! Scalar abstraction over the element type of every tensor in the crate.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};

/// Floating-point element type for all numerical code.
///
/// `f32` is the pipeline default ([`crate::Real`]); `f64` instantiations back
/// the finite-difference gradient checks in the test suites.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + LinalgScalar
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to scalar")
    }

    fn from_us(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).expect("usize converts to scalar")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
