//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed and a short list of stream identifiers, so runs are
//! reproducible and independent streams never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    stream.iter().fold(splitmix(seed), |acc, &s| splitmix(acc ^ splitmix(s)))
}

pub fn seeded(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Stream tags used across the crate.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const HELDOUT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const BASELINE: u64 = 7;
}
