use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, RwLock};

use super::hash::ContentHash;

/// Content-addressed byte store shared by a run's gateways and knowledge base.
///
/// Cloning yields another handle to the same store.
#[derive(Clone, Default)]
pub struct BlobStore {
    inner: Arc<RwLock<BTreeMap<ContentHash, Arc<[u8]>>>>,
}

impl std::fmt::Debug for BlobStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlobStore").field("len", &self.len()).finish()
    }
}

impl BlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&self, bytes: &[u8]) -> ContentHash {
        let hash = ContentHash::of_bytes(bytes);
        self.inner
            .write()
            .expect("blob store poisoned")
            .entry(hash)
            .or_insert_with(|| Arc::from(bytes));
        hash
    }

    pub fn get(&self, hash: &ContentHash) -> Option<Arc<[u8]>> {
        self.inner.read().expect("blob store poisoned").get(hash).cloned()
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        self.inner.read().expect("blob store poisoned").contains_key(hash)
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("blob store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Write the given blobs as `<dir>/<hex hash>`. Missing keys are reported as `NotFound`.
    pub fn write_dir<'a>(
        &self,
        dir: &Path,
        keys: impl IntoIterator<Item = &'a ContentHash>,
    ) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for key in keys {
            let bytes = self.get(key).ok_or_else(|| {
                io::Error::new(io::ErrorKind::NotFound, format!("blob {key} not in store"))
            })?;
            let path = dir.join(key.to_hex());
            if !path.exists() {
                crate::fsutil::write_atomic(&path, &bytes)?;
            }
        }
        Ok(())
    }

    /// Load every `<hex hash>` file under `dir`, verifying names against contents.
    pub fn read_dir(&self, dir: &Path) -> io::Result<usize> {
        if !dir.exists() {
            return Ok(0);
        }
        let mut n = 0;
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Ok(expected) = name.to_string_lossy().parse::<ContentHash>() else {
                continue;
            };
            let bytes = fs::read(entry.path())?;
            let got = self.put(&bytes);
            if got != expected {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("blob {} has content hash {got}", entry.path().display()),
                ));
            }
            n += 1;
        }
        Ok(n)
    }
}
