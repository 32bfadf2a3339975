//! Seeded parameter initialization. Draws are made in `f64` and converted, so
//! the draw sequence is the same regardless of the compute precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::scalar::{rl, Real};

use super::tensor::Tensor;

/// Deterministic initializer; draw order is declaration order.
pub struct ParamInit {
    rng: ChaCha20Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Fan-in-scaled uniform: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform_fan_in<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data: Vec<T> = (0..shape.iter().product::<usize>())
            .map(|_| rl::<T>(self.rng.gen_range(-bound..bound)))
            .collect();
        Tensor::from_vec(shape, data).expect("size computed from shape")
    }

    pub fn constant<T: Real>(&mut self, shape: &[usize], value: f64) -> Tensor<T> {
        Tensor::full(shape, rl::<T>(value))
    }
}
