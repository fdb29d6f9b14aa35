//! Web retrieval and generation operations on a [`Session`].

use std::collections::HashSet;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backend::*;
use super::session::{check_indices, GatewayError, Session};
use super::structured::Ranking;
use super::templates::InstructionRole;
use crate::fsutil;
use crate::knowledge::{ContentHash, ImageEvidence, TextEvidence, UserPrompt};
use crate::pipeline::EnrichedPrompt;

/// Results requested per search query.
pub const SEARCH_TOP_K: usize = 10;

#[derive(Serialize)]
struct SearchRequest<'a> {
    query: &'a str,
    num: usize,
}

#[derive(Serialize)]
struct UrlRequest<'a> {
    url: &'a str,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    references: &'a [ContentHash],
}

/// MIME type of a decodable image, if the bytes are one.
pub fn sniff_mime(bytes: &[u8]) -> Option<&'static str> {
    image::guess_format(bytes).ok().map(|f| f.to_mime_type())
}

/// Fully decode `bytes`; returns `(mime, width, height)` for valid, non-empty images.
pub fn decode_image(bytes: &[u8]) -> Option<(&'static str, u32, u32)> {
    if bytes.is_empty() {
        return None;
    }
    let reader = image::ImageReader::new(Cursor::new(bytes)).with_guessed_format().ok()?;
    let format = reader.format()?;
    let img = reader.decode().ok()?;
    let (w, h) = (img.width(), img.height());
    (w > 0 && h > 0).then_some((format.to_mime_type(), w, h))
}

fn normalize_hits(mut hits: Vec<SearchHit>) -> Vec<SearchHit> {
    hits.truncate(SEARCH_TOP_K);
    for (i, h) in hits.iter_mut().enumerate() {
        h.rank = i as u32 + 1;
    }
    hits
}

fn render_snippets(hits: &[SearchHit]) -> String {
    let mut out = String::new();
    for (i, h) in hits.iter().enumerate() {
        out.push_str(&format!("{}. {}\n   {}\n   {}\n", i + 1, h.title, h.url, h.snippet));
    }
    out
}

/// Output of image generation plus the manifest written next to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationArtifact {
    pub manifest: ArtifactManifest,
    pub bytes: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub backend: String,
    /// SHA-256 of the enriched prompt text.
    pub prompt_hash: ContentHash,
    pub reference_hashes: Vec<ContentHash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byte_len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mime: Option<String>,
}

pub const ARTIFACT_MANIFEST: &str = "manifest.json";

impl GenerationArtifact {
    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        if let (Some(bytes), Some(file)) = (&self.bytes, &self.manifest.image_file) {
            fsutil::write_atomic(&dir.join(file), bytes)?;
        }
        let json = fsutil::to_json_bytes(&self.manifest).map_err(std::io::Error::other)?;
        fsutil::write_atomic(&dir.join(ARTIFACT_MANIFEST), &json)
    }

    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let raw = std::fs::read(dir.join(ARTIFACT_MANIFEST))?;
        let manifest: ArtifactManifest = serde_json::from_slice(&raw).map_err(std::io::Error::other)?;
        let bytes = match &manifest.image_file {
            Some(file) => Some(std::fs::read(dir.join(file))?),
            None => None,
        };
        Ok(Self { manifest, bytes })
    }
}

fn extension_for(mime: &str) -> &'static str {
    match mime {
        "image/png" => "png",
        "image/jpeg" => "jpg",
        "image/gif" => "gif",
        "image/webp" => "webp",
        _ => "bin",
    }
}

impl Session {
    /// Text web search, at most [`SEARCH_TOP_K`] hits ranked from 1 in backend order.
    pub fn search_text(&self, query: &str) -> Result<Vec<SearchHit>, GatewayError> {
        if query.trim().is_empty() {
            return Err(GatewayError::Precondition("search query is empty".into()));
        }
        let backend = self.services().search.clone();
        let ex = self.exchange(
            ServiceKind::TextSearch,
            query,
            &SearchRequest { query, num: SEARCH_TOP_K },
            || backend.search_text(query, SEARCH_TOP_K),
            |_| (0, 0),
        )?;
        Ok(normalize_hits(ex.value))
    }

    /// Image web search; same contract as [`Session::search_text`].
    pub fn search_images(&self, query: &str) -> Result<Vec<SearchHit>, GatewayError> {
        if query.trim().is_empty() {
            return Err(GatewayError::Precondition("search query is empty".into()));
        }
        let backend = self.services().search.clone();
        let ex = self.exchange(
            ServiceKind::ImageSearch,
            query,
            &SearchRequest { query, num: SEARCH_TOP_K },
            || backend.search_images(query, SEARCH_TOP_K),
            |_| (0, 0),
        )?;
        Ok(normalize_hits(ex.value))
    }

    pub fn read_page(&self, url: &str) -> Result<PageContent, GatewayError> {
        let backend = self.services().reader.clone();
        Ok(self
            .exchange(ServiceKind::PageReader, url, &UrlRequest { url }, || backend.read(url), |_| (0, 0))?
            .value)
    }

    pub fn download(&self, url: &str) -> Result<Download, GatewayError> {
        let backend = self.services().downloader.clone();
        Ok(self
            .exchange(ServiceKind::ImageDownload, url, &UrlRequest { url }, || backend.download(url), |_| (0, 0))?
            .value)
    }

    /// Have the model rank the snippets, then read pages in ranked order until `keep`
    /// succeed. Unreachable or empty pages are skipped and the next-ranked hit is tried.
    pub fn rank_and_fetch_pages(
        &self,
        prompt: &UserPrompt,
        query: &str,
        hits: &[SearchHit],
        keep: usize,
    ) -> Result<Vec<TextEvidence>, GatewayError> {
        if keep == 0 {
            return Err(GatewayError::Precondition("keep must be at least 1".into()));
        }
        if hits.is_empty() {
            return Ok(Vec::new());
        }
        let snippets = render_snippets(hits);
        let ranked = self.invoke_structured::<Ranking>(
            InstructionRole::SnippetRank,
            &[("prompt", &prompt.text), ("query", query), ("snippets", &snippets)],
            &[],
            |r| check_indices("ranking", &r.ranking, hits.len()),
        )?;

        let mut seen = HashSet::new();
        let mut pages = Vec::new();
        for idx in ranked.value.ranking {
            if pages.len() >= keep {
                break;
            }
            if !seen.insert(idx) {
                continue;
            }
            let hit = &hits[idx - 1];
            match self.read_page(&hit.url) {
                Ok(page) if !page.content.trim().is_empty() => pages.push(TextEvidence::new(
                    page.content,
                    hit.url.clone(),
                    hit.snippet.clone(),
                    page.fetched_at,
                    query,
                )),
                Ok(_) => self.warn(format!("page {} returned no content; trying next ranked hit", hit.url)),
                Err(e @ GatewayError::Backend { .. }) => {
                    self.warn(format!("page {} unreachable ({e}); trying next ranked hit", hit.url))
                }
                Err(e) => return Err(e),
            }
        }
        if pages.is_empty() {
            self.warn(format!("no readable pages for query {query:?}"));
        }
        Ok(pages)
    }

    /// First `keep` accessible, decodable, byte-unique images in rank order.
    /// Accepted bytes are stored in the session's blob store.
    pub fn select_images(&self, query: &str, hits: &[SearchHit], keep: usize) -> Result<Vec<ImageEvidence>, GatewayError> {
        if keep == 0 {
            return Err(GatewayError::Precondition("keep must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for hit in hits {
            if out.len() >= keep {
                break;
            }
            let url = hit.fetch_url();
            let download = match self.download(url) {
                Ok(d) => d,
                Err(e @ GatewayError::Backend { .. }) => {
                    self.warn(format!("image {url} unreachable: {e}"));
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !(200..300).contains(&download.status) {
                self.warn(format!("image {url} returned status {}", download.status));
                continue;
            }
            let Some((mime, width, height)) = decode_image(&download.bytes) else {
                self.warn(format!("image {url} is empty or undecodable"));
                continue;
            };
            let hash = ContentHash::of_bytes(&download.bytes);
            if !seen.insert(hash) {
                tracing::debug!(%url, "duplicate image bytes skipped");
                continue;
            }
            self.blobs().put(&download.bytes);
            out.push(ImageEvidence {
                blob_key: hash.to_hex(),
                title: hit.title.clone(),
                source_url: url.to_string(),
                query_of_origin: query.to_string(),
                content_hash: hash,
                mime: mime.to_string(),
                width,
                height,
            });
        }
        if out.is_empty() && !hits.is_empty() {
            self.warn(format!("no accessible images for query {query:?}"));
        }
        Ok(out)
    }

    /// Send the enriched prompt and its reference images to the generator.
    pub fn generate_image(&self, enriched: &EnrichedPrompt) -> Result<GenerationArtifact, GatewayError> {
        if enriched.prompt_text.trim().is_empty() {
            return Err(GatewayError::Precondition("enriched prompt is empty".into()));
        }
        let refs: Vec<ContentHash> = enriched.refined_images.iter().map(|i| i.content_hash).collect();
        let inputs = self.image_inputs(&refs)?;
        let backend = self.services().generator.clone();
        let prompt = enriched.prompt_text.as_str();
        let ex = self.exchange(
            ServiceKind::ImageGen,
            "generate",
            &GenerateRequest { prompt, references: &refs },
            || backend.generate(prompt, &inputs),
            |_| (0, 0),
        )?;
        let generated = ex.value;
        let mime = generated
            .mime
            .clone()
            .or_else(|| generated.bytes.as_deref().and_then(sniff_mime).map(str::to_string));
        let image_file = generated
            .bytes
            .as_ref()
            .map(|_| format!("image.{}", extension_for(mime.as_deref().unwrap_or(""))));
        Ok(GenerationArtifact {
            manifest: ArtifactManifest {
                backend: generated.backend,
                prompt_hash: ContentHash::of_bytes(prompt.as_bytes()),
                reference_hashes: refs,
                image_file,
                byte_len: generated.bytes.as_ref().map(|b| b.len() as u64),
                mime,
            },
            bytes: generated.bytes,
        })
    }
}
