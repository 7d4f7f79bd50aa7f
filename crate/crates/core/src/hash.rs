//! Content addressing for artifacts: SHA-256 over a git-style blob header,
//! `"blob <len>\0" ++ bytes`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{ImcError, Result};

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{}", hex::encode(h.finalize()))
}

pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| ImcError::io(path, e))?;
    Ok(content_hash(&bytes))
}
