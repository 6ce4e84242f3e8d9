//! Deterministic derivation of independent RNG substreams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] whose seed is
//! derived from a user-supplied base seed plus integer tags through the
//! SplitMix64 finalizer, so no state is shared between substreams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hash of a base seed and a sequence of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(base: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags used across the crate, kept in one place so that no two
/// consumers accidentally share a substream.
pub mod tags {
    pub const CORPUS_MAPS: u64 = 1;
    pub const CORPUS_SPEAKER: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const EPOCH_PLAN: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const TRAIN_NOISE: u64 = 6;
    pub const VERIFIER: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const PRIOR: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_tags_give_distinct_seeds() {
        let a = derive_seed(7, &[1, 0]);
        assert_ne!(a, derive_seed(7, &[1, 1]));
        assert_ne!(a, derive_seed(7, &[0, 1]));
        assert_ne!(a, derive_seed(8, &[1, 0]));
        assert_eq!(a, derive_seed(7, &[1, 0]));
    }
}
