//! Deterministic random-stream derivation.
//!
//! A single global seed fans out into independent streams keyed by a stage label and
//! integer parts (image index, reconstruction start step, ...). Streams are stable across
//! runs and independent of scheduling, so any stage can be rerun in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the label and parts; cheap and stable.
fn mix(seed: u64, label: &str, parts: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(PRIME);
    };
    for b in seed.to_le_bytes() {
        eat(b);
    }
    for b in label.as_bytes() {
        eat(*b);
    }
    for p in parts {
        for b in p.to_le_bytes() {
            eat(b);
        }
    }
    h
}

/// Derive a named random stream from the global seed.
pub fn stream(seed: u64, label: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, label, parts))
}

/// Fill a buffer with standard normal draws.
pub fn fill_standard_normal(rng: &mut ChaCha8Rng, out: &mut [f32]) {
    use rand_distr::{Distribution, StandardNormal};
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// A fresh standard normal vector of the given length.
pub fn standard_normal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    let mut out = vec![0.0; len];
    fill_standard_normal(rng, &mut out);
    out
}
