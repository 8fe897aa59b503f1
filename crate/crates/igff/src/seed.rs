//! Deterministic RNG derivation.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream derived
//! from `(master_seed, stage_tag, indices)`. Parallel estimators derive one
//! stream per work item, so results do not depend on the worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream for `(master, stage, indices)`.
pub fn derive_rng(master: u64, stage: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(master, stage, indices))
}

/// Collapse the derivation to a single u64, for nesting master seeds.
pub fn derive_seed(master: u64, stage: &str, indices: &[u64]) -> u64 {
    let key = derive_key(master, stage, indices);
    u64::from_le_bytes(key[..8].try_into().unwrap())
}

fn derive_key(master: u64, stage: &str, indices: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((stage.len() as u64).to_le_bytes());
    hasher.update(stage.as_bytes());
    for &ix in indices {
        hasher.update(ix.to_le_bytes());
    }
    hasher.finalize().into()
}
