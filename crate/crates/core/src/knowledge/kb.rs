use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use super::hash::ContentHash;
use super::types::{ImageEvidence, TextEvidence};

/// Smallest digest budget accepted by [`KnowledgeBase::context_digest`].
pub const MIN_DIGEST_CHARS: usize = 256;

/// Header emitted at the top of every digest, including the empty one.
pub const DIGEST_HEADER: &str = "# Knowledge base\n";

/// Run-scoped store of filtered evidence.
///
/// Values are immutable: [`KnowledgeBase::merge`] returns a new base. Texts and images
/// keep insertion order, and every entry remembers the round in which it was first added.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    texts: Vec<TextEvidence>,
    images: Vec<ImageEvidence>,
    round_added: BTreeMap<ContentHash, u32>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn from_parts(
        texts: Vec<TextEvidence>,
        images: Vec<ImageEvidence>,
        round_added: BTreeMap<ContentHash, u32>,
    ) -> Self {
        Self {
            texts,
            images,
            round_added,
        }
    }

    pub fn texts(&self) -> &[TextEvidence] {
        &self.texts
    }

    pub fn images(&self) -> &[ImageEvidence] {
        &self.images
    }

    pub fn round_added(&self) -> &BTreeMap<ContentHash, u32> {
        &self.round_added
    }

    pub fn round_of(&self, hash: &ContentHash) -> Option<u32> {
        self.round_added.get(hash).copied()
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        self.round_added.contains_key(hash)
    }

    pub fn len(&self) -> usize {
        self.texts.len() + self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Union with new evidence. Entries whose hash is already present (including
    /// duplicates within the incoming lists) are dropped; new entries are tagged `round`.
    pub fn merge(&self, texts: &[TextEvidence], images: &[ImageEvidence], round: u32) -> Self {
        let mut next = self.clone();
        for t in texts {
            if let Entry::Vacant(slot) = next.round_added.entry(t.content_hash) {
                slot.insert(round);
                next.texts.push(t.clone());
            }
        }
        for img in images {
            if let Entry::Vacant(slot) = next.round_added.entry(img.content_hash) {
                slot.insert(round);
                next.images.push(img.clone());
            }
        }
        next
    }

    /// Bounded, deterministic rendering of the base for model context.
    ///
    /// Texts are listed before images, each in insertion order. When the full rendering
    /// exceeds `max_chars` whole entries are evicted, oldest round first, until it fits.
    /// Budgets below [`MIN_DIGEST_CHARS`] are raised to that minimum.
    pub fn context_digest(&self, max_chars: usize) -> String {
        let max_chars = max_chars.max(MIN_DIGEST_CHARS);
        let mut entries: Vec<(u32, usize, String)> = Vec::with_capacity(self.len());
        for (i, t) in self.texts.iter().enumerate() {
            let round = self.round_of(&t.content_hash).unwrap_or(0);
            entries.push((round, i, render_text(i + 1, round, t)));
        }
        for (i, img) in self.images.iter().enumerate() {
            let round = self.round_of(&img.content_hash).unwrap_or(0);
            entries.push((round, self.texts.len() + i, render_image(i + 1, round, img)));
        }

        let header_len = DIGEST_HEADER.chars().count();
        let mut total: usize = header_len + entries.iter().map(|e| e.2.chars().count()).sum::<usize>();
        let mut keep = vec![true; entries.len()];
        if total > max_chars {
            let mut eviction: Vec<usize> = (0..entries.len()).collect();
            eviction.sort_by_key(|&k| (entries[k].0, entries[k].1));
            for k in eviction {
                if total <= max_chars {
                    break;
                }
                keep[k] = false;
                total -= entries[k].2.chars().count();
            }
        }

        let mut out = String::with_capacity(total);
        out.push_str(DIGEST_HEADER);
        for (entry, kept) in entries.iter().zip(&keep) {
            if *kept {
                out.push_str(&entry.2);
            }
        }
        out
    }
}

fn render_text(n: usize, round: u32, t: &TextEvidence) -> String {
    format!(
        "[T{n}] round {round} | source: {}\n{}\n\n",
        t.source_url,
        t.content.trim_end()
    )
}

fn render_image(n: usize, round: u32, img: &ImageEvidence) -> String {
    format!(
        "[I{n}] round {round} | title: {} | source: {} | blob: {} | {}x{}\n",
        img.title, img.source_url, img.blob_key, img.width, img.height
    )
}
