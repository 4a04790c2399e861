use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::Tensor;

/// Seeded xoshiro256++ generator.
///
/// The 256-bit state is expanded from the 64-bit seed with SplitMix64, so a
/// given seed yields the same stream on every platform. Streams for sub-tasks
/// are derived with [`Rng::fork`] rather than by sharing one generator, which
/// keeps results independent of evaluation order.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for sub-stream `stream` of this generator's seed.
    pub fn fork(&self, stream: u64) -> Rng {
        // splitmix64 finalizer over (seed, stream)
        let mut z = self
            .seed
            .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Rng::new(z ^ (z >> 31))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.inner.gen();
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = self.inner.sample(StandardNormal);
        mean + std * z
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        let u: f64 = self.inner.gen();
        u < p
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn normal_tensor(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor {
        assert!(std >= 0.0, "std must be non-negative");
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|x| *x = self.normal(mean, std));
        t
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "empty interval");
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|x| *x = self.uniform(lo, hi));
        t
    }
}
