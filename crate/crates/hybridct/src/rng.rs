//! Seed derivation.
//!
//! Every stochastic component draws from a generator derived from the run
//! seed plus a purpose tag, so results are independent of evaluation order
//! and identical across platforms and thread counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent generator from `(seed, tag, index)`.
pub fn derive_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derive a generator keyed by a string (e.g. a record id) and an epoch.
pub fn derive_rng_keyed(seed: u64, tag: &str, key: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update([0xff]);
    hasher.update(key.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(out)
}
