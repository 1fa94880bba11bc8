use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal, StandardUniform};

use super::Tensor;

/// Seeded sample stream: ChaCha8 keyed by `seed_from_u64(seed)`, normals via
/// the ziggurat sampler of `rand_distr`. Both are portable, so a seed names
/// the same stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream, e.g. one per layer or per frame.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        StandardUniform.sample(&mut self.inner)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.normal()).collect()
    }

    pub fn normal_tensor(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| std * self.normal())
    }

    pub fn uniform_tensor(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| lo + (hi - lo) * self.uniform())
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::new(42).normal_tensor([3, 4], 1.0);
        let b = Rng::new(42).normal_tensor([3, 4], 1.0);
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&Rng::new(43).normal_tensor([3, 4], 1.0)));
    }

    // Pins the generator so a dependency bump that changes the stream fails
    // loudly instead of silently shifting every seeded result.
    #[test]
    fn stream_is_pinned() {
        assert_eq!(Rng::new(0).next_u64(), 13_080_132_717_333_068_652);
        assert_eq!(Rng::new(1).normal(), -0.234_847_058_555_920_97);
    }
}
