//! Scalar abstraction: the numeric core works for any real field (f32/f64).

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar usable throughout the numeric core.
pub trait Scalar: RealField + FromPrimitive + ToPrimitive + Copy {}

impl<T: RealField + FromPrimitive + ToPrimitive + Copy> Scalar for T {}

/// Shorthand conversion from an `f64` literal.
#[inline]
pub fn s<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 conversion")
}

/// 0.5 as `T`.
#[inline]
pub fn half<T: Scalar>() -> T {
    s(0.5)
}
