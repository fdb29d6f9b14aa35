//! On-disk layout: `<dir>/manifest.json` plus `<dir>/blobs/<hash>` for image bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::blobs::BlobStore;
use super::hash::ContentHash;
use super::kb::KnowledgeBase;
use super::types::{ImageEvidence, TextEvidence};
use crate::fsutil;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_DIR: &str = "blobs";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    texts: Vec<TextEvidence>,
    images: Vec<ImageEvidence>,
    round_added: BTreeMap<ContentHash, u32>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Canonical manifest bytes for `kb`. Byte-identical for structurally equal bases.
pub fn manifest_bytes(kb: &KnowledgeBase) -> Vec<u8> {
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        texts: kb.texts().to_vec(),
        images: kb.images().to_vec(),
        round_added: kb.round_added().clone(),
    };
    fsutil::to_json_bytes(&manifest).expect("manifest serializes")
}

impl KnowledgeBase {
    /// Persist the base under `dir`. Image bytes come from `blobs`.
    pub fn save(&self, dir: &Path, blobs: &BlobStore) -> Result<(), PersistError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let blob_dir = dir.join(BLOB_DIR);
        blobs
            .write_dir(&blob_dir, self.images().iter().map(|i| &i.content_hash))
            .map_err(io_err(&blob_dir))?;
        let path = dir.join(MANIFEST_FILE);
        fsutil::write_atomic(&path, &manifest_bytes(self)).map_err(io_err(&path))
    }

    /// Load a base saved by [`KnowledgeBase::save`]. Nothing is returned on any error.
    pub fn load(dir: &Path) -> Result<KnowledgeBase, PersistError> {
        let path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&path).map_err(io_err(&path))?;
        let parse_err = |field: String, message: String| PersistError::Parse {
            path: path.clone(),
            field,
            message,
        };
        let de = &mut serde_json::Deserializer::from_slice(&raw);
        let manifest: Manifest = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            parse_err(field, e.into_inner().to_string())
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(parse_err(
                "version".into(),
                format!("unsupported version {}", manifest.version),
            ));
        }
        for (i, t) in manifest.texts.iter().enumerate() {
            if ContentHash::of_text(&t.content) != t.content_hash {
                return Err(parse_err(
                    format!("texts[{i}].content_hash"),
                    "does not match normalized content".into(),
                ));
            }
            if !manifest.round_added.contains_key(&t.content_hash) {
                return Err(parse_err(
                    "round_added".into(),
                    format!("no round for texts[{i}] ({})", t.content_hash),
                ));
            }
        }
        let blob_dir = dir.join(BLOB_DIR);
        for (i, img) in manifest.images.iter().enumerate() {
            if img.blob_key != img.content_hash.to_hex() {
                return Err(parse_err(
                    format!("images[{i}].blob_key"),
                    "does not match content_hash".into(),
                ));
            }
            if !manifest.round_added.contains_key(&img.content_hash) {
                return Err(parse_err(
                    "round_added".into(),
                    format!("no round for images[{i}] ({})", img.content_hash),
                ));
            }
            if !blob_dir.join(&img.blob_key).is_file() {
                return Err(parse_err(
                    format!("images[{i}].blob_key"),
                    format!("blob {} missing under {}", img.blob_key, blob_dir.display()),
                ));
            }
        }
        let entries = manifest.texts.len() + manifest.images.len();
        if manifest.round_added.len() != entries {
            return Err(parse_err(
                "round_added".into(),
                format!(
                    "{} rounds recorded for {entries} entries (duplicate or stray hashes)",
                    manifest.round_added.len()
                ),
            ));
        }
        Ok(KnowledgeBase::from_parts(
            manifest.texts,
            manifest.images,
            manifest.round_added,
        ))
    }
}

/// Load the blobs saved alongside a knowledge base.
pub fn load_blobs(dir: &Path, into: &BlobStore) -> Result<usize, PersistError> {
    let blob_dir = dir.join(BLOB_DIR);
    into.read_dir(&blob_dir).map_err(io_err(&blob_dir))
}
