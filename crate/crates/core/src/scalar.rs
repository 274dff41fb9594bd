//! Scalar abstraction: the dense math is generic over f32/f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable by the matrix, vector, and transport code.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Denominators smaller than this are treated as underflow in
    /// diagonal-scaling updates rather than producing infinities.
    fn denom_floor() -> Self;

    /// Tolerance for probability-mass sums (measures, softmax outputs).
    fn mass_tolerance() -> Self;

    /// Shorthand for lossless-enough f64 constants.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("constant convertible to scalar")
    }
}

impl Scalar for f64 {
    fn denom_floor() -> Self {
        1e-300
    }
    fn mass_tolerance() -> Self {
        1e-9
    }
}

impl Scalar for f32 {
    fn denom_floor() -> Self {
        1e-30
    }
    fn mass_tolerance() -> Self {
        1e-5
    }
}
