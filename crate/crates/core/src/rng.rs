//! Seed derivation. Every stage draws from its own ChaCha stream derived
//! from the root seed and a stage label, so adding draws to one stage never
//! shifts the randomness seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stage_rng(root: u64, label: &str) -> StageRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}
