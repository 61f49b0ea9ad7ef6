//! Deterministic stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! pure function of a small tuple of integers, so results never depend on
//! call order or worker scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Order-sensitive combination of several words into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// FNV-1a, for turning names into stream ids.
pub fn name_id(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

// Domain tags keep streams for different purposes apart.
pub(crate) const TAG_TASK: u64 = 1;
pub(crate) const TAG_EPISODE: u64 = 2;
pub(crate) const TAG_BATCH: u64 = 3;
pub(crate) const TAG_ADAPTER: u64 = 4;
pub(crate) const TAG_MODEL: u64 = 5;
pub(crate) const TAG_SUITE: u64 = 6;
pub(crate) const TAG_EPISODE_INDEX: u64 = 7;
pub(crate) const TAG_EVAL: u64 = 8;
