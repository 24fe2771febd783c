//! Counter-based seed derivation.
//!
//! Every task in a sweep gets its seed from `(root, stream, index)` alone, so the
//! result of a task never depends on which worker ran it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep seeds for unrelated purposes apart.
pub mod stream {
    pub const MATRIX: u64 = 1;
    pub const RUN: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const CORRECTOR: u64 = 4;
    pub const REPETITION: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SAMPLING: u64 = 7;
    pub const NEGATIVES: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ stream) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
