//! Seed derivation. Every stochastic step in the crate draws from a ChaCha8
//! stream keyed by a base seed plus a path of stream indices, so that parallel
//! and serial execution consume identical randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with a path of stream indices into a single 64-bit seed.
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(splitmix64(seed), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

/// Deterministic generator for `(seed, stream...)`.
pub fn rng_for(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

// Stream tags so that unrelated consumers of the same base seed never collide.
pub(crate) const STREAM_MASK: u64 = 1;
pub(crate) const STREAM_SPLIT: u64 = 2;
pub(crate) const STREAM_GEN: u64 = 3;
pub(crate) const STREAM_ROLLOUT: u64 = 4;
pub(crate) const STREAM_INIT: u64 = 5;
pub(crate) const STREAM_BATCH: u64 = 6;
pub(crate) const STREAM_RANDOM_SELECT: u64 = 7;
