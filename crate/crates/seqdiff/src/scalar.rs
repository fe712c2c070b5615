//! Floating-point abstraction so the whole stack runs in either f32 or f64.
//!
//! Training runs in f32; gradient checking instantiates the identical code in
//! f64 where central finite differences are trustworthy.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

/// Element type for all tensors in the engine.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Display
    + std::fmt::Debug
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// One draw from N(0, 1).
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One draw from Uniform(-a, a).
    fn sample_uniform_sym<R: Rng + ?Sized>(rng: &mut R, a: Self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        // Draw in f64 so f32 and f64 builds consume identical RNG streams.
        let x: f64 = rng.sample(StandardNormal);
        x as f32
    }
    fn sample_uniform_sym<R: Rng + ?Sized>(rng: &mut R, a: Self) -> Self {
        let u: f64 = rng.gen::<f64>();
        ((2.0 * u - 1.0) * a as f64) as f32
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
    fn sample_uniform_sym<R: Rng + ?Sized>(rng: &mut R, a: Self) -> Self {
        let u: f64 = rng.gen::<f64>();
        (2.0 * u - 1.0) * a
    }
}
