//! Content-addressed byte store. Every read re-hashes what the backend
//! returns.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use fedx_core::blob::{is_sha256_hex, sha256_hex, BlobRef};

use crate::error::{Result, ServiceError};

pub trait BlobBackend: Send + Sync {
    fn write(&self, hash: &str, bytes: &[u8]) -> std::io::Result<()>;
    fn read(&self, hash: &str) -> std::io::Result<Option<Vec<u8>>>;
    fn hashes(&self) -> std::io::Result<Vec<String>>;
}

#[derive(Default)]
pub struct MemoryBackend {
    blobs: RwLock<HashMap<String, Arc<Vec<u8>>>>,
}

impl BlobBackend for MemoryBackend {
    fn write(&self, hash: &str, bytes: &[u8]) -> std::io::Result<()> {
        self.blobs.write().unwrap().entry(hash.to_string()).or_insert_with(|| Arc::new(bytes.to_vec()));
        Ok(())
    }

    fn read(&self, hash: &str) -> std::io::Result<Option<Vec<u8>>> {
        Ok(self.blobs.read().unwrap().get(hash).map(|b| b.as_ref().clone()))
    }

    fn hashes(&self) -> std::io::Result<Vec<String>> {
        let mut v: Vec<String> = self.blobs.read().unwrap().keys().cloned().collect();
        v.sort();
        Ok(v)
    }
}

/// One file per blob, named by its hash. Writes go to a unique temporary
/// file that is renamed into place, so concurrent identical puts are safe.
pub struct DirBackend {
    root: PathBuf,
}

impl DirBackend {
    pub fn new(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn path_of(&self, hash: &str) -> PathBuf {
        self.root.join(hash)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl BlobBackend for DirBackend {
    fn write(&self, hash: &str, bytes: &[u8]) -> std::io::Result<()> {
        let target = self.path_of(hash);
        if target.exists() {
            return Ok(());
        }
        let tmp = self.root.join(format!(".{hash}.{:016x}.tmp", rand::random::<u64>()));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &target)
    }

    fn read(&self, hash: &str) -> std::io::Result<Option<Vec<u8>>> {
        match std::fs::read(self.path_of(hash)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn hashes(&self) -> std::io::Result<Vec<String>> {
        let mut v = Vec::new();
        for entry in std::fs::read_dir(&self.root)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if is_sha256_hex(&name) {
                v.push(name);
            }
        }
        v.sort();
        Ok(v)
    }
}

pub struct BlobStore {
    backend: Box<dyn BlobBackend>,
}

impl BlobStore {
    pub fn new(backend: Box<dyn BlobBackend>) -> Self {
        Self { backend }
    }

    pub fn memory() -> Self {
        Self::new(Box::new(MemoryBackend::default()))
    }

    pub fn directory(root: impl Into<PathBuf>) -> Result<Self> {
        Ok(Self::new(Box::new(DirBackend::new(root)?)))
    }

    pub fn put(&self, bytes: &[u8]) -> Result<BlobRef> {
        let r = BlobRef::of(bytes);
        self.backend.write(&r.sha256_hex, bytes)?;
        Ok(r)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>> {
        if !is_sha256_hex(hash) {
            return Err(ServiceError::NotFound(format!("blob {hash}")));
        }
        let bytes = self.backend.read(hash)?.ok_or_else(|| ServiceError::NotFound(format!("blob {hash}")))?;
        let actual = sha256_hex(&bytes);
        if actual != hash {
            return Err(ServiceError::Integrity(format!("blob {hash} hashes to {actual}")));
        }
        Ok(bytes)
    }

    pub fn get_ref(&self, r: &BlobRef) -> Result<Vec<u8>> {
        let bytes = self.get(&r.sha256_hex)?;
        if bytes.len() as u64 != r.size_bytes {
            return Err(ServiceError::Integrity(format!("blob {} has {} bytes, ref says {}", r.sha256_hex, bytes.len(), r.size_bytes)));
        }
        Ok(bytes)
    }

    pub fn contains(&self, hash: &str) -> bool {
        matches!(self.backend.read(hash), Ok(Some(_)))
    }

    /// Every stored hash, sorted.
    pub fn hashes(&self) -> Result<Vec<String>> {
        Ok(self.backend.hashes()?)
    }
}
