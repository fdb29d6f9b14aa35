//! Prompts, evidence, and the run-scoped knowledge base.

mod blobs;
mod hash;
mod kb;
mod persist;
mod types;

pub use blobs::BlobStore;
pub use hash::{normalize_text, ContentHash, InvalidHash};
pub use kb::{KnowledgeBase, DIGEST_HEADER, MIN_DIGEST_CHARS};
pub use persist::{load_blobs, manifest_bytes, PersistError, BLOB_DIR, MANIFEST_FILE, MANIFEST_VERSION};
pub use types::{
    is_well_formed_url, Concept, EntityClass, GroundTruthFeature, ImageEvidence, InvalidPrompt,
    TextEvidence, UserPrompt,
};
