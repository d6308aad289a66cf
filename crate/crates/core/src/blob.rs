use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Content address of a stored byte string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlobRef {
    #[serde(rename = "sha256")]
    pub sha256_hex: String,
    #[serde(rename = "size")]
    pub size_bytes: u64,
}

impl BlobRef {
    pub fn of(bytes: &[u8]) -> Self {
        Self { sha256_hex: sha256_hex(bytes), size_bytes: bytes.len() as u64 }
    }

    pub fn is_well_formed(&self) -> bool {
        is_sha256_hex(&self.sha256_hex)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// 64 lowercase hex characters.
pub fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}
