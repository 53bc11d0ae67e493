//! Deterministic RNG stream derivation.
//!
//! Every stochastic component takes an explicit generator. Independent
//! streams (per document, per pass, per worker) are derived from a root seed
//! with a SplitMix64 mix so that results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a stream label and an index into a child seed.
pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(stream)) ^ splitmix(index.wrapping_add(0x5851_F42D)))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn child_rng(seed: u64, stream: u64, index: u64) -> Rng {
    rng(derive(seed, stream, index))
}

/// Stream labels used across the crate.
pub mod streams {
    pub const CORPUS: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const DECODE: u64 = 6;
    pub const PASS: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const REPLAY: u64 = 9;
    pub const MARKOV: u64 = 10;
    pub const GLYPH: u64 = 11;
    pub const WORDS: u64 = 12;
    pub const EPSILON: u64 = 13;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_spreads() {
        assert_eq!(derive(7, 1, 2), derive(7, 1, 2));
        assert_ne!(derive(7, 1, 2), derive(7, 1, 3));
        assert_ne!(derive(7, 1, 2), derive(7, 2, 2));
        assert_ne!(derive(7, 1, 2), derive(8, 1, 2));
    }
}
