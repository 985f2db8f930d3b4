//! Deterministic sub-seed derivation.
//!
//! Every random stream in a simulation run is seeded from the master seed
//! through a labelled hash, so independent components never share a stream
//! and reruns are bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derive a 64-bit sub-seed from `(master, label, index)`.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// A ChaCha20 stream seeded from a derived sub-seed.
pub fn rng_from(master: u64, label: &str, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(master, label, index))
}
