use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::Result;

/// Trainable tensor drawn from `U(−b, b)` with `b = gain·sqrt(3 / fan_in)`,
/// which gives variance `gain² / fan_in`. Use `gain = sqrt(2)` ahead of ReLU.
pub fn fan_in_uniform(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(values, shape)
}

pub fn zeros_param(shape: &[usize]) -> Result<Tensor> {
    Tensor::param(vec![0.0; shape.iter().product()], shape)
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
