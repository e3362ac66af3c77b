//! SHA-256 helpers for parameter and configuration fingerprints.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

pub fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Incremental hasher over tensors of real values.
#[derive(Default)]
pub struct ParamHasher {
    inner: Sha256,
    scratch: Vec<u8>,
}

impl ParamHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn label(&mut self, name: &str) {
        self.inner.update((name.len() as u64).to_le_bytes());
        self.inner.update(name.as_bytes());
    }

    pub fn values<T: crate::Real>(&mut self, values: &[T]) {
        self.scratch.clear();
        for &v in values {
            v.extend_le_bytes(&mut self.scratch);
        }
        self.inner.update((values.len() as u64).to_le_bytes());
        self.inner.update(&self.scratch);
    }

    pub fn bytes(&mut self, bytes: &[u8]) {
        self.inner.update(bytes);
    }

    pub fn finish(self) -> String {
        to_hex(&self.inner.finalize())
    }
}
