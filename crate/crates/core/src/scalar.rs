//! Floating-point element trait.
//!
//! Training runs in `f32`; the gradient checker can instantiate the whole
//! pipeline in `f64` because central differences in single precision bound
//! the achievable tolerance.

use std::fmt::Debug;

use num_traits::Float;

/// Element type for tensors and the gradient tape.
pub trait Scalar: Float + Debug + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
    fn from_usize(x: usize) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn from_usize(x: usize) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn from_usize(x: usize) -> Self {
        x as f64
    }
}
