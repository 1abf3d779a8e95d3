//! Seeded random streams.
//!
//! Every stochastic routine takes a caller-owned generator. Independent
//! streams (replications, outcomes, restarts) are derived from a base seed
//! by hashing, so runs are reproducible regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from `(base, tag)`.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    mix(mix(base) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}
