use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::hash::ContentHash;

/// The ten benchmark entity classes, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityClass {
    Animal,
    Sports,
    Transportation,
    Landmarks,
    Food,
    People,
    Plants,
    Products,
    Culture,
    Events,
}

impl EntityClass {
    pub const ALL: [EntityClass; 10] = [
        EntityClass::Animal,
        EntityClass::Sports,
        EntityClass::Transportation,
        EntityClass::Landmarks,
        EntityClass::Food,
        EntityClass::People,
        EntityClass::Plants,
        EntityClass::Products,
        EntityClass::Culture,
        EntityClass::Events,
    ];

    pub fn abbrev(self) -> &'static str {
        match self {
            EntityClass::Animal => "An.",
            EntityClass::Sports => "Sp.",
            EntityClass::Transportation => "Tr.",
            EntityClass::Landmarks => "La.",
            EntityClass::Food => "Fo.",
            EntityClass::People => "Pe.",
            EntityClass::Plants => "Pl.",
            EntityClass::Products => "Pr.",
            EntityClass::Culture => "Cu.",
            EntityClass::Events => "Ev.",
        }
    }
}

impl fmt::Display for EntityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Concept categories: perceptual fidelity, compositional consistency, temporal consistency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Concept {
    PF,
    CC,
    TC,
}

impl Concept {
    pub const ALL: [Concept; 3] = [Concept::PF, Concept::CC, Concept::TC];
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPrompt {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_class: Option<EntityClass>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub concept_tags: BTreeSet<Concept>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid prompt {id:?}: {reason}")]
pub struct InvalidPrompt {
    pub id: String,
    pub reason: String,
}

impl UserPrompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            entity_class: None,
            concept_tags: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<(), InvalidPrompt> {
        if self.text.trim().is_empty() {
            return Err(InvalidPrompt {
                id: self.id.clone(),
                reason: "prompt text is blank".into(),
            });
        }
        if self.id.trim().is_empty() {
            return Err(InvalidPrompt {
                id: self.id.clone(),
                reason: "prompt id is blank".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEvidence {
    pub content: String,
    pub source_url: String,
    pub snippet: String,
    pub retrieved_at: DateTime<Utc>,
    pub query_of_origin: String,
    pub content_hash: ContentHash,
}

impl TextEvidence {
    pub fn new(
        content: impl Into<String>,
        source_url: impl Into<String>,
        snippet: impl Into<String>,
        retrieved_at: DateTime<Utc>,
        query_of_origin: impl Into<String>,
    ) -> Self {
        let content = content.into();
        let content_hash = ContentHash::of_text(&content);
        Self {
            content,
            source_url: source_url.into(),
            snippet: snippet.into(),
            retrieved_at,
            query_of_origin: query_of_origin.into(),
            content_hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEvidence {
    /// Key into the blob store; always the hex form of `content_hash`.
    pub blob_key: String,
    pub title: String,
    pub source_url: String,
    pub query_of_origin: String,
    pub content_hash: ContentHash,
    pub mime: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthFeature {
    pub id: String,
    pub statement: String,
    pub concept: Concept,
}

pub fn is_well_formed_url(s: &str) -> bool {
    url::Url::parse(s)
        .map(|u| matches!(u.scheme(), "http" | "https" | "file" | "data" | "blob"))
        .unwrap_or(false)
}
