//! Deterministic seed derivation.
//!
//! One master seed fans out into independent streams (dataset splits,
//! weight init, epoch shuffles, per-sample draws) via SplitMix64 over an
//! FNV-tagged key, so adding a consumer never perturbs existing streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed, a purpose tag, and an index.
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(master ^ fnv1a(tag) ^ splitmix64(index))
}

/// Seeded RNG for one purpose. ChaCha8 keeps streams stable across
/// platforms and dependency updates.
pub fn rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, index))
}
