//! Deterministic seed derivation. Every random draw in a run descends from
//! the master seed through a hashed context path, so parallel generation and
//! resumed runs reproduce the same streams.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

const DOMAIN_TAG: &[u8] = b"selfpref.seed.v1";

fn digest(master_seed: u64, context: &[&str]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(DOMAIN_TAG);
    hasher.update(master_seed.to_le_bytes());
    for part in context {
        hasher.update([0u8]);
        hasher.update(part.as_bytes());
    }
    hasher.finalize().into()
}

/// Substream generator for a (master seed, context path) pair.
pub fn derive_rng(master_seed: u64, context: &[&str]) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(digest(master_seed, context))
}

/// A derived 64-bit seed, for places that need a seed rather than a stream.
pub fn derive_seed(master_seed: u64, context: &[&str]) -> u64 {
    let bytes = digest(master_seed, context);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}
