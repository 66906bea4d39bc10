//! Seeded deterministic random numbers and parameter initializers.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Deterministic generator: the same seed always yields the same draws.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// An independent child stream, derived only from this generator's seed
    /// and `stream` (not from how many draws were made).
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream.wrapping_add(0x5eed))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn normal_tensor(&mut self, dims: &[usize], std: f64) -> Tensor {
        let mut t = Tensor::zeros(dims);
        for v in t.data_mut() {
            *v = std * self.normal();
        }
        t
    }

    pub fn uniform_tensor(&mut self, dims: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut t = Tensor::zeros(dims);
        for v in t.data_mut() {
            *v = self.uniform(lo, hi);
        }
        t
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Glorot (Xavier) uniform initialization on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    assert!(fan_in > 0 && fan_out > 0, "fans must be positive");
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_tensor(&[fan_in, fan_out], -bound, bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.counter(), b.counter());
        assert!(a.counter() > 0);
    }

    #[test]
    fn forks_are_independent_of_draw_position() {
        let a = Rng::new(3);
        let mut b = Rng::new(3);
        b.normal();
        assert_eq!(a.fork(1).next_u64(), b.fork(1).next_u64());
        assert_ne!(a.fork(1).next_u64(), a.fork(2).next_u64());
    }

    #[test]
    fn glorot_bound_for_small_fans() {
        let bound = 1.5f64.sqrt();
        let t = glorot_init(&mut Rng::new(0), 2, 2);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn glorot_variance_matches_closed_form() {
        // Var(U[-b, b]) = b²/3 = 2 / (fan_in + fan_out)
        let (fan_in, fan_out) = (200, 500);
        let t = glorot_init(&mut Rng::new(11), fan_in, fan_out);
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (fan_in + fan_out) as f64;
        assert!((var - expected).abs() / expected < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn glorot_deterministic() {
        assert_eq!(
            glorot_init(&mut Rng::new(5), 3, 4),
            glorot_init(&mut Rng::new(5), 3, 4)
        );
    }
}
