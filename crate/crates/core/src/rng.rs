//! Seed derivation so every random draw is addressable by a tuple of
//! integers (run seed, step, stream, sample index, ...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`, order-sensitively.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Generator for the stream addressed by `(seed, parts...)`.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}

/// Stream identifiers used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const MASK_TEXT: u64 = 3;
    pub const MASK_IMAGE: u64 = 4;
    pub const MASK_PAIR_TEXT: u64 = 5;
    pub const MASK_PAIR_IMAGE: u64 = 6;
    pub const ROUTER_NOISE: u64 = 7;
    pub const BATCH: u64 = 8;
}
