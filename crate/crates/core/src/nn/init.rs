use rand::Rng;

use crate::tensor::{Real, Tensor};

/// Kaiming-uniform initialization for ReLU networks: U(−b, b) with
/// `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}
