//! Stable sub-seed derivation.
//!
//! Every run draws randomness from one master seed; per-task and per-step
//! seeds are derived by hashing stable identifiers so that adding or
//! reordering work items never perturbs the seeds of existing ones.

use sha2::{Digest, Sha256};

/// Derive a child seed from a master seed and a list of string labels.
///
/// The derivation is a SHA-256 over the master seed and the labels with
/// length framing, truncated to 64 bits. It is stable across platforms and
/// releases; artifacts on disk depend on it.
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// A uniform draw in `[0, 1)` derived from a seed and labels, for
/// order-independent noise decisions (e.g. label flips on concurrent calls).
pub fn derive_unit(master: u64, labels: &[&str]) -> f64 {
    // 53 mantissa bits give a uniform dyadic rational in [0, 1).
    (derive_seed(master, labels) >> 11) as f64 / (1u64 << 53) as f64
}
