//! Seed derivation for reproducible runs.
//!
//! Every stochastic component (environment instance, evaluation episode,
//! training seed) draws from its own ChaCha stream derived from a base seed
//! and a stream index, so results never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream.iter().fold(mix(base), |acc, s| mix(acc ^ mix(*s)))
}

pub fn seeded(base: u64, stream: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, stream))
}
