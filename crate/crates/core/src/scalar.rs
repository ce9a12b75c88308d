//! Scalar abstraction for the numeric kernels.
//!
//! Every estimator in this crate is written against [`Scalar`] so the same
//! code runs in `f64` (the default, used by the CLI and the test suite) or
//! `f32`. Concrete `f64` aliases live at the crate root.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the library computes with.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ToPrimitive
        + Sum<Self>
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Cast an `f64` constant into the working scalar type.
#[inline]
pub fn cast<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("constant not representable in scalar type")
}

/// Cast a count into the working scalar type.
#[inline]
pub fn cast_usize<F: Scalar>(v: usize) -> F {
    F::from_usize(v).expect("count not representable in scalar type")
}

/// True when `v` is a usable (strictly positive, non-NaN) denominator.
#[inline]
pub fn is_positive<F: Scalar>(v: F) -> bool {
    v.partial_cmp(&F::zero()) == Some(std::cmp::Ordering::Greater)
}

/// Numerically stable logistic function `exp(x) / (1 + exp(x))`.
#[inline]
pub fn expit<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        let e = (-x).exp();
        F::one() / (F::one() + e)
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Log-odds of a probability in (0, 1).
#[inline]
pub fn logit<F: Scalar>(p: F) -> F {
    (p / (F::one() - p)).ln()
}

/// Scalars the random layers (simulation, bootstrap) can sample directly.
pub trait RandScalar: Scalar {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl RandScalar for f64 {
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    #[inline]
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
}

impl RandScalar for f32 {
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    #[inline]
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
}
