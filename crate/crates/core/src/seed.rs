//! Fan-out of one top-level seed into stable per-item seeds.
//!
//! A derived seed depends only on the top-level seed and the item label, so work can be
//! scheduled in any order or in parallel without changing results.

use sha2::{Digest, Sha256};

/// First eight bytes (little-endian) of SHA-256 over the seed bytes followed by `label`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}
