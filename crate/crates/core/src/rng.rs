//! Seeded random streams.
//!
//! Backed by ChaCha8, whose output is specified bit-for-bit and therefore
//! identical across platforms for the same seed and draw sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const RNG_ALGORITHM: &str = "chacha8";

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    draws: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            draws: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Number of scalar draws made so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Independent child stream; used to give each generated pair its own
    /// seed derived from a master seed.
    pub fn fork(&mut self) -> RngStream {
        RngStream::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        self.draws += 1;
        self.inner.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.draws += 1;
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.int_range(0, i);
            items.swap(i, j);
        }
    }

    pub fn normal_tensor<T: Element>(&mut self, shape: &[usize], std: f64) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::from_f64(std * self.normal())).collect();
        Tensor::new(shape, data)
    }
}

/// I.i.d. `N(0, std^2)` weights.
pub fn gaussian_init<T: Element>(rng: &mut RngStream, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gaussian init requires a positive finite std, got {std}"
        )));
    }
    rng.normal_tensor(shape, std)
}
