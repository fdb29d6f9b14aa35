//! Service interfaces and the normalized request/response types recorded in cassettes.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::templates::InstructionRole;
use crate::knowledge::ContentHash;

/// The external services a run talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Model,
    TextSearch,
    ImageSearch,
    PageReader,
    ImageDownload,
    ImageGen,
}

impl ServiceKind {
    pub const ALL: [ServiceKind; 6] = [
        ServiceKind::Model,
        ServiceKind::TextSearch,
        ServiceKind::ImageSearch,
        ServiceKind::PageReader,
        ServiceKind::ImageDownload,
        ServiceKind::ImageGen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ServiceKind::Model => "model",
            ServiceKind::TextSearch => "text_search",
            ServiceKind::ImageSearch => "image_search",
            ServiceKind::PageReader => "page_reader",
            ServiceKind::ImageDownload => "image_download",
            ServiceKind::ImageGen => "image_gen",
        }
    }

    /// Web retrieval services, whose latency counts toward retrieval time.
    pub fn is_retrieval(self) -> bool {
        matches!(
            self,
            ServiceKind::TextSearch
                | ServiceKind::ImageSearch
                | ServiceKind::PageReader
                | ServiceKind::ImageDownload
        )
    }

    /// Search calls, the unit of "retrieval calls" in cost reports.
    pub fn is_search(self) -> bool {
        matches!(self, ServiceKind::TextSearch | ServiceKind::ImageSearch)
    }
}

impl std::fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct BackendError {
    pub message: String,
    pub retryable: bool,
}

impl BackendError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: false,
        }
    }

    /// 408, 429 and 5xx are worth retrying; other statuses are not.
    pub fn from_status(status: u16, body: &str) -> Self {
        let message = format!("http status {status}: {}", truncate(body, 200));
        if status == 408 || status == 429 || status >= 500 {
            Self::transient(message)
        } else {
            Self::permanent(message)
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Attached image passed to the model or the generator.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub hash: ContentHash,
    pub mime: String,
    pub bytes: std::sync::Arc<[u8]>,
}

#[derive(Debug, Clone)]
pub struct ModelCall {
    pub role: InstructionRole,
    pub prompt: String,
    pub images: Vec<ImageInput>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelReply {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
}

impl ModelReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            input_tokens: None,
            output_tokens: None,
        }
    }
}

/// One search result. Text hits carry a snippet; image hits carry `image_url`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub rank: u32,
    pub url: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub snippet: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

impl SearchHit {
    pub fn text(rank: u32, url: impl Into<String>, title: impl Into<String>, snippet: impl Into<String>) -> Self {
        Self {
            rank,
            url: url.into(),
            title: title.into(),
            snippet: snippet.into(),
            image_url: None,
        }
    }

    pub fn image(rank: u32, page_url: impl Into<String>, title: impl Into<String>, image_url: impl Into<String>) -> Self {
        Self {
            rank,
            url: page_url.into(),
            title: title.into(),
            snippet: String::new(),
            image_url: Some(image_url.into()),
        }
    }

    /// URL to download for image hits, falling back to the page URL.
    pub fn fetch_url(&self) -> &str {
        self.image_url.as_deref().unwrap_or(&self.url)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageContent {
    pub content: String,
    pub fetched_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Download {
    pub status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_type: Option<String>,
    #[serde(with = "b64")]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub backend: String,
    #[serde(default, with = "b64_opt", skip_serializing_if = "Option::is_none")]
    pub bytes: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mime: Option<String>,
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, call: &ModelCall) -> Result<ModelReply, BackendError>;
}

pub trait SearchBackend: Send + Sync {
    fn search_text(&self, query: &str, num: usize) -> Result<Vec<SearchHit>, BackendError>;
    fn search_images(&self, query: &str, num: usize) -> Result<Vec<SearchHit>, BackendError>;
}

pub trait PageReader: Send + Sync {
    fn read(&self, url: &str) -> Result<PageContent, BackendError>;
}

pub trait ImageDownloader: Send + Sync {
    /// Non-success statuses are returned as a `Download`, not an error.
    fn download(&self, url: &str) -> Result<Download, BackendError>;
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, prompt: &str, references: &[ImageInput]) -> Result<GeneratedImage, BackendError>;
}

/// Placeholder for services with no binding; every call fails permanently.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unbound;

fn unbound(service: &str) -> BackendError {
    BackendError::permanent(format!(
        "no live backend bound for {service}; configure one or replay from a cassette"
    ))
}

impl ModelBackend for Unbound {
    fn complete(&self, _: &ModelCall) -> Result<ModelReply, BackendError> {
        Err(unbound("model"))
    }
}

impl SearchBackend for Unbound {
    fn search_text(&self, _: &str, _: usize) -> Result<Vec<SearchHit>, BackendError> {
        Err(unbound("text search"))
    }
    fn search_images(&self, _: &str, _: usize) -> Result<Vec<SearchHit>, BackendError> {
        Err(unbound("image search"))
    }
}

impl PageReader for Unbound {
    fn read(&self, _: &str) -> Result<PageContent, BackendError> {
        Err(unbound("page reader"))
    }
}

impl ImageDownloader for Unbound {
    fn download(&self, _: &str) -> Result<Download, BackendError> {
        Err(unbound("image download"))
    }
}

impl ImageGenerator for Unbound {
    fn generate(&self, _: &str, _: &[ImageInput]) -> Result<GeneratedImage, BackendError> {
        Err(unbound("image generation"))
    }
}

/// Generator that produces no pixels; the artifact manifest echoes its inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubGenerator;

impl ImageGenerator for StubGenerator {
    fn generate(&self, _: &str, _: &[ImageInput]) -> Result<GeneratedImage, BackendError> {
        Ok(GeneratedImage {
            backend: "stub".into(),
            bytes: None,
            mime: None,
        })
    }
}

pub(crate) mod b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

pub(crate) mod b64_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match bytes {
            Some(b) => super::b64::serialize(b, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super::b64")] Vec<u8>);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}
