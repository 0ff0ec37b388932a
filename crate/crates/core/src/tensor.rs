//! Dense row-major tensor value.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Dense multi-dimensional array in row-major order.
///
/// An empty `shape` denotes a scalar (one stored value). `requires_grad`
/// marks whether the value participates in the gradient tape when used as
/// a leaf; intermediate tape nodes track their own flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(CoreError::BadShape {
                op: "tensor",
                msg: format!("shape holds {} values, data holds {}", numel(&shape), data.len()),
                shape,
            });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![S::zero(); n], requires_grad: false }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![S::one(); n], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![value; n], requires_grad: false }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    /// Gaussian init, mean 0.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0f64, std).expect("std must be finite");
        let n = numel(&shape);
        let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
        Tensor { shape, data, requires_grad: false }
    }

    /// Uniform init on [-bound, bound].
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound);
        let n = numel(&shape);
        let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
        Tensor { shape, data, requires_grad: false }
    }

    /// Xavier-uniform init for a (fan_in x fan_out) weight.
    pub fn xavier<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::rand_uniform(vec![fan_in, fan_out], bound, rng)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Exact bit equality, shape included. Basis of the freeze contract.
    pub fn bits_eq(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f32()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}
