//! Weight initialization.

use super::conv::{Conv2d, PadMode};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4};
use rand::Rng;

/// Standard normal draw routed through f64 so every scalar type sees the
/// same stream.
pub fn normal<S: Scalar, R: Rng>(rng: &mut R, std: f64) -> S {
    let u: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
    S::from_f(u * std)
}

/// He-normal initialized convolution: std = sqrt(2 / fan_in).
pub fn he_conv<S: Scalar, R: Rng>(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
    bias: bool,
    rng: &mut R,
) -> Conv2d<S> {
    let fan_in = (in_channels * kernel * kernel) as f64;
    let std = (2.0 / fan_in).sqrt();
    let weight = Array4::from_shape_simple_fn((out_channels, in_channels, kernel, kernel), || {
        normal::<S, R>(rng, std)
    });
    let bias = bias.then(|| Array1::<S>::zeros(out_channels));
    Conv2d::new(weight, bias, stride, padding, pad_mode)
}

/// Classifier row initialization: N(0, 1/sqrt(dim)) per coordinate.
pub fn head_rows<S: Scalar, R: Rng>(classes: usize, dim: usize, rng: &mut R) -> Array2<S> {
    let std = 1.0 / (dim as f64).sqrt();
    Array2::from_shape_simple_fn((classes, dim), || normal::<S, R>(rng, std))
}
