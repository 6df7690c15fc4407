//! Seed derivation so every random decision draws from its own stream.
//!
//! Streams are keyed by `(master seed, tags...)`; changing how many numbers
//! one consumer draws never shifts another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of tags into a seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream identifiers used with [`derive_seed`].
pub mod stream {
    pub const INIT: u64 = 1;
    pub const LABELED_ORDER: u64 = 2;
    pub const UNLABELED_ORDER: u64 = 3;
    pub const CONTRASTIVE: u64 = 4;
    pub const CONSISTENCY: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const EMBED: u64 = 7;
    pub const PHANTOM: u64 = 8;
}
