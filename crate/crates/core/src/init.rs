use rand::Rng;
use sdfa_autograd::{Scalar, Tensor};

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual default for conv and
/// dense layers.
pub fn fan_in_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

/// He uniform `[-sqrt(6/fan_in), sqrt(6/fan_in)]`: keeps the second moment of
/// post-ReLU inputs when no normalization follows.
pub fn he_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}
