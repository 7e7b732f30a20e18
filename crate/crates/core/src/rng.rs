//! Seeded random streams.
//!
//! Every stochastic operation in the crate draws from [`SeededRng`], a
//! xoshiro256** generator whose 256-bit state is expanded from a 64-bit seed
//! with SplitMix64. Normal draws use the ziggurat sampler of `rand_distr`.
//! Both algorithms are fixed and platform independent, so a seed names one
//! stream everywhere.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for the `stream`-th substream of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(mix64(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// FNV-1a over UTF-8 bytes; stable identifier hashing for synthetic providers.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Xoshiro256StarStar,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Generator for substream `stream` of `seed`.
    pub fn derived(seed: u64, stream: u64) -> Self {
        Self::new(derive_seed(seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p >= 1.0 {
            // consume a draw so streams stay aligned across probabilities
            let _ = self.uniform();
            return true;
        }
        self.uniform() < p
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.normal() * std)).collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        let mut c = SeededRng::new(43);
        let mut a = SeededRng::new(42);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn normal_mean_within_clt_bound() {
        let mut r = SeededRng::new(7);
        let n = 100_000;
        let mean = (0..n).map(|_| r.normal()).sum::<f64>() / n as f64;
        // 3 sigma / sqrt(n) ~ 0.0095; the stated bound is 0.02
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn bernoulli_half_rate() {
        let mut r = SeededRng::new(11);
        let hits = (0..10_000).filter(|_| r.bernoulli(0.5)).count();
        let rate = hits as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&rate), "rate {rate}");
    }

    #[test]
    fn derived_streams_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(hash_str(""), 0xcbf29ce484222325);
        assert_eq!(hash_str("a"), 0xaf63dc4c8601ec8c);
    }
}
