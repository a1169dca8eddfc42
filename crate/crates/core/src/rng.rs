//! Seed derivation. Every random stream in a run is a ChaCha generator
//! keyed by a mix of the run seed and a purpose-specific tag, so results do
//! not depend on call order across unrelated components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng(seed: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, parts))
}

// stream tags
pub const TAG_INIT: u64 = 1;
pub const TAG_DROPOUT: u64 = 2;
pub const TAG_SHUFFLE: u64 = 3;
pub const TAG_REPLAY: u64 = 4;
pub const TAG_ORDER: u64 = 5;
pub const TAG_PROBE: u64 = 6;
pub const TAG_SPLIT: u64 = 7;
pub const TAG_DATA: u64 = 8;
