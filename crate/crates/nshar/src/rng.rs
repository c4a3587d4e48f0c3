//! Deterministic RNG streams and stable hashing.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! the master seed plus a purpose tag, so adding draws to one component never
//! shifts another, and runs are bit-reproducible for a given seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over raw bytes (also used for config/split fingerprints).
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 finalizer: spreads low-entropy seeds over the full range.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Stream for one purpose ("init", "shuffle", "mask", ...).
pub fn stream(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(master ^ fnv1a_64(tag.as_bytes())))
}

/// Indexed stream, e.g. one per epoch or per window.
pub fn substream(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, index))
}

/// Derived 64-bit seed (for APIs that take a seed rather than an Rng).
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    mix(mix(master ^ fnv1a_64(tag.as_bytes())) ^ index)
}

// ── tests ───────────────────────────────────────────────────────────────────
