//! Seeded, reproducible random streams.
//!
//! Every stochastic piece of the artifact (measurement noise, fit restarts)
//! owns its own stream derived from the master seed and an integer path, so
//! that e.g. the plant-noise draws of batch B are identical across controller
//! configurations — paired-seed comparisons depend on this.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Deterministic pseudo-random stream; equal seeds give bit-equal sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    seed: u64,
}

/// SplitMix64 output function, used to mix path components into child seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// Child stream keyed by `(master, path)`. Distinct paths give
    /// statistically independent streams; the derivation never consumes
    /// draws from any parent, so adding consumers elsewhere cannot shift it.
    pub fn derive(master: u64, path: &[u64]) -> Self {
        let mut h = mix64(master);
        for &p in path {
            h = mix64(h ^ p.wrapping_mul(0xA24B_AED4_963E_E407));
        }
        Self::new(h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One standard-normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// One uniform draw from [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}
