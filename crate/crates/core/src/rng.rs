//! Seed derivation. Every consumer gets its own stream, split from one root
//! seed by label, so adding a consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

/// Stream for one training step; stateless so a resumed run draws the same numbers.
pub fn step_stream(root: u64, label: &str, step: usize) -> ChaCha8Rng {
    stream(root, &format!("{label}/step{step}"))
}
