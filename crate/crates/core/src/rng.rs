//! Seed derivation. Every random draw in a run comes from a ChaCha8 stream
//! whose seed is derived from the run seed and a stream label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over `base` and `stream`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Stream labels used across the crate.
pub mod streams {
    pub const NOISE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const EPSILON: u64 = 5;
    pub const EVAL_EPSILON: u64 = 6;
    pub const PROBE: u64 = 7;
}
