use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::RngCore;
use serde::Serialize;
use thiserror::Error;

use crate::digest::digest_bytes;

const NONCE_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("payload store I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("payload {0} not found")]
    NotFound(String),
    #[error("payload failed authentication")]
    Decrypt,
    #[error("invalid vault key")]
    BadKey,
}

/// 256-bit symmetric key for payloads at rest.
#[derive(Clone)]
pub struct VaultKey([u8; 32]);

impl std::fmt::Debug for VaultKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("VaultKey(..)")
    }
}

impl VaultKey {
    pub fn generate() -> Self {
        let mut key = [0u8; 32];
        rand::rng().fill_bytes(&mut key);
        Self(key)
    }

    pub fn from_hex(s: &str) -> Result<Self, VaultError> {
        let bytes = hex::decode(s.trim()).map_err(|_| VaultError::BadKey)?;
        Ok(Self(bytes.try_into().map_err(|_| VaultError::BadKey)?))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

#[derive(Debug)]
enum Backend {
    Memory(BTreeMap<String, Vec<u8>>),
    Dir(PathBuf),
}

/// Encrypted-at-rest store for audit payloads (case inputs, model outputs).
/// Records in the chain reference payloads by the digest of the ciphertext.
#[derive(Debug)]
pub struct PayloadVault {
    cipher_key: VaultKey,
    backend: Backend,
}

impl PayloadVault {
    pub fn in_memory(key: VaultKey) -> Self {
        Self {
            cipher_key: key,
            backend: Backend::Memory(BTreeMap::new()),
        }
    }

    pub fn in_dir(key: VaultKey, dir: impl Into<PathBuf>) -> Result<Self, VaultError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            cipher_key: key,
            backend: Backend::Dir(dir),
        })
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(&Key::from(self.cipher_key.0))
    }

    /// Encrypt and store; returns the payload reference.
    pub fn store<T: Serialize>(&mut self, payload: &T) -> Result<String, VaultError> {
        let plaintext = serde_json::to_vec(payload).expect("payload serializes");
        let mut nonce = [0u8; NONCE_LEN];
        rand::rng().fill_bytes(&mut nonce);
        let mut blob = nonce.to_vec();
        blob.extend(
            self.cipher()
                .encrypt(&Nonce::from(nonce), plaintext.as_slice())
                .map_err(|_| VaultError::Decrypt)?,
        );
        let reference = digest_bytes(&blob);
        match &mut self.backend {
            Backend::Memory(map) => {
                map.insert(reference.clone(), blob);
            }
            Backend::Dir(dir) => fs::write(dir.join(format!("{reference}.bin")), &blob)?,
        }
        Ok(reference)
    }

    pub fn raw(&self, reference: &str) -> Result<Vec<u8>, VaultError> {
        match &self.backend {
            Backend::Memory(map) => map
                .get(reference)
                .cloned()
                .ok_or_else(|| VaultError::NotFound(reference.to_string())),
            Backend::Dir(dir) => fs::read(dir.join(format!("{reference}.bin")))
                .map_err(|_| VaultError::NotFound(reference.to_string())),
        }
    }

    pub fn load(&self, reference: &str) -> Result<serde_json::Value, VaultError> {
        let blob = self.raw(reference)?;
        if blob.len() < NONCE_LEN {
            return Err(VaultError::Decrypt);
        }
        let (nonce, ct) = blob.split_at(NONCE_LEN);
        let nonce: [u8; NONCE_LEN] = nonce.try_into().expect("split at nonce length");
        let plain = self
            .cipher()
            .decrypt(&Nonce::from(nonce), ct)
            .map_err(|_| VaultError::Decrypt)?;
        serde_json::from_slice(&plain).map_err(|_| VaultError::Decrypt)
    }
}
