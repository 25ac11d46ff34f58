//! Scalar abstraction: the solver core is generic over the floating-point type.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar the grid, kernel and solver modules are generic over.
///
/// Implemented for `f32` and `f64`. Tolerance-sensitive work (the shipped
/// scenarios and the acceptance suite) uses `f64`; `f32` is available for
/// memory-bound experiments.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum<T>
        + fmt::Debug
        + fmt::Display
        + Send
        + Sync
        + 'static
{
}

/// Converts an `f64` constant into the working scalar type.
///
/// Panics only if the conversion is unrepresentable, which cannot happen for
/// the finite constants used in this crate (f32 rounds or flushes to zero).
pub(crate) fn cast<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 constant not representable in scalar type")
}
