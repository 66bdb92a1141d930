//! Domain-separated seed derivation.
//!
//! Every stochastic step in the simulator owns an RNG stream whose seed is
//! derived from a tag plus the relevant identifiers, so adding devices,
//! epochs, or rounds never perturbs unrelated streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from a domain tag and a list of identifiers.
pub fn derive_seed(tag: &str, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    hasher.update([0u8]);
    for part in parts {
        hasher.update(part.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// RNG for a derived stream.
pub fn stream_rng(tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(tag, parts))
}
