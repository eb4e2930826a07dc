//! Stable hashing used for seed derivation, tie-breaks and fingerprints.
//!
//! Everything here must produce the same value across runs, platforms and
//! thread schedules, so it is built on SHA-256 rather than `std::hash`.

use sha2::{Digest, Sha256};

/// Incremental builder over length-prefixed fields.
#[derive(Clone, Default)]
pub struct StableHasher {
    inner: Sha256,
}

impl StableHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn str(mut self, s: &str) -> Self {
        self.inner.update((s.len() as u64).to_le_bytes());
        self.inner.update(s.as_bytes());
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.inner.update(v.to_le_bytes());
        self
    }

    pub fn finish_u64(self) -> u64 {
        let digest = self.inner.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn finish_hex(self) -> String {
        self.inner
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Derives a child seed from a parent seed and a labelled path of parts.
pub fn derive_seed(seed: u64, label: &str, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(StableHasher::new().u64(seed).str(label), |h, &p| h.u64(p))
        .finish_u64()
}

/// Hex SHA-256 of arbitrary bytes.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
