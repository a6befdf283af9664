//! Seeded randomness. Every stochastic step in the pipeline draws from a
//! [`SeedStream`] derived from `(run seed, purpose tag)`, so runs are
//! reproducible bit-for-bit and independent stages do not share streams.

use crate::scalar::Real;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic random stream for one purpose ("classifier-init",
/// "train-shuffle", ...).
pub struct SeedStream {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeedStream {
    pub fn new(seed: u64, tag: &str) -> Self {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tag)),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform<F: Real>(&mut self, lo: F, hi: F) -> F {
        lo + (hi - lo) * F::of(self.uniform_f64())
    }

    /// Standard normal via Box-Muller (pairs cached).
    pub fn normal_f64(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform_f64();
        let u2 = self.uniform_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal<F: Real>(&mut self, mean: F, sd: F) -> F {
        mean + sd * F::of(self.normal_f64())
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform_f64() * n as f64) as usize % n
    }

    /// Fisher-Yates permutation of 0..n.
    pub fn shuffled_indices(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    /// Fill with N(0, sd^2) entries.
    pub fn fill_normal<F: Real>(&mut self, out: &mut [F], sd: F) {
        for v in out.iter_mut() {
            *v = self.normal(F::zero(), sd);
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeedStream::new(7, "x");
        let mut b = SeedStream::new(7, "x");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn tags_give_independent_streams() {
        let mut a = SeedStream::new(7, "x");
        let mut b = SeedStream::new(7, "y");
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments_sane() {
        let mut s = SeedStream::new(0, "normal");
        let n = 20000;
        let xs: Vec<f64> = (0..n).map(|_| s.normal_f64()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut s = SeedStream::new(3, "shuffle");
        let mut idx = s.shuffled_indices(257);
        idx.sort_unstable();
        assert_eq!(idx, (0..257).collect::<Vec<_>>());
    }
}
