//! Stable seed derivation.
//!
//! Derived seeds must not depend on platform, iteration order, or thread
//! count, so they are taken from a SHA-256 digest of their inputs rather than
//! from `std`'s randomized hasher.

use sha2::{Digest, Sha256};

/// A seed that depends only on `(base, tag, index)`.
pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
