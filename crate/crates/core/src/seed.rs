//! Seed derivation.
//!
//! Every random decision in the pipeline draws from a generator seeded by a
//! hash of the global seed and a path label such as `"p17/judge/3"`. Results
//! therefore depend only on *what* is being computed, never on scheduling
//! order, which keeps concurrent runs byte-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a child seed from `base` and a path label.
pub fn derive(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, label: &str) -> Rng {
    rng(derive(base, label))
}
