use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Real scalar used by the interpreter and the learning substrate.
///
/// Implemented for `f32` and `f64`. Constants are lifted through
/// [`Real::lit`] so numeric code stays generic.
pub trait Real:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Display + Default + Sum + Send + Sync
{
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
