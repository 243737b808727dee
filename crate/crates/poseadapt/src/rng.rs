//! Seeded random number generation.
//!
//! All randomness in the crate flows through [`SeedRng`], a thin wrapper
//! around the ChaCha12 stream cipher RNG. ChaCha produces the same stream
//! for the same seed on every platform, which is what makes the
//! "same seed, same bytes" guarantees of the experiment harness hold.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Deterministic RNG: ChaCha12 keyed by a 64-bit seed.
#[derive(Debug, Clone)]
pub struct SeedRng {
    seed: u64,
    inner: ChaCha12Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream for a named sub-task.
    ///
    /// Streams for different `(label, index)` pairs are decorrelated from
    /// each other and from the parent, and do not depend on how much of the
    /// parent stream was already consumed.
    pub fn fork(&self, label: &str, index: u64) -> SeedRng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for b in label.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= index;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
        SeedRng::new(h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }
}
