//! Seed plumbing. Every stochastic component draws from its own ChaCha
//! stream whose seed is derived from the run seed plus a stable tag, so
//! results never depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and an ordered list of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, tags))
}

/// Stable tags for the top-level streams.
pub mod tag {
    pub const SOURCE: u64 = 1;
    pub const TARGET: u64 = 2;
    pub const TEST: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const CLASSIFIER: u64 = 6;
    pub const SAMPLING: u64 = 7;
    pub const CLIENT: u64 = 8;
    pub const DOMAIN: u64 = 9;
}
