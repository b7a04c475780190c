//! Seed derivation for independent random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! `SHA-256(seed_le || label || index_le)`. Streams for different purposes
//! (batch selection, masking, sampling...) never overlap, and any single
//! stream can be recreated from the master seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, label: &str, index: u64) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Stream for a two-level index such as (step, batch item).
pub fn stream2(seed: u64, label: &str, outer: u64, inner: u64) -> StreamRng {
    stream(seed, label, outer.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ inner.rotate_left(32))
}
