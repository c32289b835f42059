//! Seeded randomness and parameter initializers.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Deterministic generator; identical seeds give identical streams on every
/// platform.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream derived from `seed` and a label, e.g. a step index.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        Self(r)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.0.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.gen()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.0);
    }
}

/// Variance-preserving gain of a leaky rectifier with negative slope `slope`.
pub fn leaky_gain(slope: f64) -> f64 {
    crate::math::sqrt(2.0 / (1.0 + slope * slope))
}

/// Uniform with variance `gain^2 / fan_in`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Tensor {
    let bound = gain * crate::math::sqrt(3.0 / fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
}
