//! Deterministic pseudo-randomness.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`) keyed by a
//! [`Seed`] through `SeedableRng::seed_from_u64`, optionally split onto an
//! independent ChaCha stream number. ChaCha output is specified bit-for-bit,
//! so equal seeds give identical streams on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::types::Seed;

/// Seeded generator used throughout the crate.
#[derive(Debug, Clone)]
pub struct DetRng {
    inner: ChaCha8Rng,
}

impl DetRng {
    pub fn new(seed: Seed) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed.0),
        }
    }

    /// An independent stream derived from `seed` and a stream number.
    pub fn with_stream(seed: Seed, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed.0);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.random::<u64>() >> 11) as f64 * f64::powi(2.0, -53)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// A uniformly distributed direction on the unit sphere in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Moves `amount` uniformly chosen elements to the front of `items`
    /// (partial Fisher-Yates) and returns them.
    pub fn choose_prefix<'a, T>(&mut self, items: &'a mut [T], amount: usize) -> &'a mut [T] {
        items.partial_shuffle(&mut self.inner, amount).0
    }
}

/// `n` uniform reals in `[0, 1)` from the stream keyed by `seed`.
pub fn rng_uniform(seed: Seed, n: usize) -> Vec<f64> {
    let mut rng = DetRng::new(seed);
    (0..n).map(|_| rng.uniform()).collect()
}

/// 64-bit FNV-1a, used to derive stream numbers from identifiers.
pub(crate) fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
