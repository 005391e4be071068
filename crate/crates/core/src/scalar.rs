//! Scalar abstraction over the floating-point element type.
//!
//! All numeric code in this crate is generic over [`Scalar`], so the same
//! routines run in `f32` or `f64`. The pipeline itself uses the `f64`
//! aliases exported from the crate root; the tolerances quoted throughout
//! the test suite assume 64-bit arithmetic.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type: `f32` or `f64`.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the working scalar type.
#[inline]
pub fn real<T: Scalar>(x: f64) -> T {
    T::from(x).expect("finite f64 constant must convert to the scalar type")
}

/// Converts a count into the working scalar type.
#[inline]
pub fn count<T: Scalar>(n: usize) -> T {
    T::from(n).expect("count must convert to the scalar type")
}
