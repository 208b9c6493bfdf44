//! Scalar abstraction: every numerical routine in this crate is generic over
//! a real floating point type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar type the library is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Shorthand for lossy conversion from `f64` literals and tolerances.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    /// Lossy conversion to `f64` for reporting and traces.
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
