//! Deterministic RNG streams and stable text hashing.
//!
//! Every random decision in the crate draws from a ChaCha8 stream derived
//! from the experiment seed and a purpose label, so independent pipeline
//! stages (init, shuffling, target sampling, evaluation draws) never share
//! state and runs replay bit-identically from the seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// SHA-256 of a text, used as the stable key for feature and trigger caches.
pub fn text_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Hex form of [`text_digest`].
pub fn text_digest_hex(text: &str) -> String {
    let digest = text_digest(text);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// A named RNG stream derived from `seed`.
///
/// The label keeps streams for different purposes independent; the same
/// (seed, label) pair always yields the same stream on every platform.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Order-sensitive FNV-1a accumulator for logging sampling sequences.
///
/// Two training runs sampled identically iff their accumulated hashes match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceHash(u64);

impl SequenceHash {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn push(&mut self, value: u64) {
        for byte in value.to_le_bytes() {
            self.0 ^= u64::from(byte);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn push_str(&mut self, value: &str) {
        for byte in value.as_bytes() {
            self.0 ^= u64::from(*byte);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

impl Default for SequenceHash {
    fn default() -> Self {
        Self::new()
    }
}
