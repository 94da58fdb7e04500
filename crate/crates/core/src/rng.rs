//! Seeded random streams.
//!
//! Every stochastic step derives its generator from a `(seed, stream)` pair so
//! that independent stages never share state and results are a pure function
//! of their inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream identifiers.
pub mod stream {
    pub const VOCABULARY: u64 = 1;
    pub const CAMPAIGNS: u64 = 2;
    pub const ITEMS: u64 = 3;
    pub const REPORTS: u64 = 4;
    pub const ANNOTATE: u64 = 5;
    pub const CONCAT: u64 = 6;
    pub const INIT: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const SAMPLE: u64 = 9;
}

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes two words into one seed (splitmix64 finaliser).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
