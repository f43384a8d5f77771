//! Structured label extraction from free-text clinical reports with local
//! language models: synthetic corpora, retrieval, prompting, a model client
//! and mock backend, output parsing, metrics and hyperparameter sweeps.

pub mod corpus;
pub mod lm_client;
pub mod metrics;
pub mod postprocess;
pub mod prompting;
pub mod retrieval;
pub mod sweep;

use sha2::{Digest, Sha256};

/// Stable 64-bit hash: the first 8 bytes of SHA-256 over the
/// length-prefixed parts.
pub fn stable_hash64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
