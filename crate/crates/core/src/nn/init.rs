//! Seeded parameter initializers.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Uniform on ±√(6/fan_in), marked as requiring gradients.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let b = (6.0 / fan_in.max(1) as f64).sqrt();
    Ok(Tensor::rand_uniform(shape, -b, b, rng)?.with_requires_grad())
}

/// Uniform on ±1/√fan_in.
pub fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    Ok(Tensor::rand_uniform(shape, -b, b, rng)?.with_requires_grad())
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    Ok(Tensor::randn(shape, 0.0, std, rng)?.with_requires_grad())
}
