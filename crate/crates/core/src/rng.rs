//! Hierarchical seed derivation.
//!
//! Every random stream is keyed by the master seed plus a path such as
//! `["train", "round", "3"]`. Streams with different paths are independent,
//! so adding a strategy or a round never shifts anyone else's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(master: u64, path: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for part in path {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, path: &[&str]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
