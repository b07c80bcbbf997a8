//! Seeded uniform streams for excitation data.

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Name written into data descriptors so the stream can be reproduced
/// elsewhere.
pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha 0.10, SeedableRng::seed_from_u64); \
uniform(lo, hi) = lo + (hi - lo) * ((next_u64 >> 11) * 2^-53)";

pub struct UniformStream {
    rng: ChaCha20Rng,
}

impl UniformStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.unit()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = UniformStream::new(7);
        let mut b = UniformStream::new(7);
        for _ in 0..100 {
            assert_eq!(a.uniform(-1.0, 1.0).to_bits(), b.uniform(-1.0, 1.0).to_bits());
        }
    }

    #[test]
    fn samples_stay_in_range() {
        let mut s = UniformStream::new(1);
        for _ in 0..10_000 {
            let v = s.uniform(10.0, 20.0);
            assert!((10.0..20.0).contains(&v));
        }
    }
}
