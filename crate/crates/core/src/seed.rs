//! Seed derivation. Every random draw in training and sampling is keyed by a
//! `(seed, stream, index)` triple so results do not depend on call order or
//! worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Stream tags.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const ROUTE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const TIME: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SAMPLE_NOISE: u64 = 6;
    pub const SAMPLE_ROUTE: u64 = 7;
}
