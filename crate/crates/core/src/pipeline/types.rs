use serde::{Deserialize, Serialize};

use crate::accounting::ExchangeRecord;
use crate::gateways::{Decision, Modality, PlannedQuery};
use crate::knowledge::{ContentHash, ImageEvidence, KnowledgeBase, UserPrompt};

/// Most queries dispatched in one round.
pub const MAX_QUERIES_PER_ROUND: usize = 5;

/// Sub-questions and the modality-tagged queries planned for one loop round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub round: u32,
    pub sub_questions: Vec<String>,
    /// Queries in the order the model listed them.
    pub queries: Vec<PlannedQuery>,
    /// Number of non-blank queries the model proposed before truncation.
    pub proposed: usize,
}

impl QueryPlan {
    pub fn text_queries(&self) -> Vec<&str> {
        self.by_modality(Modality::Text)
    }

    pub fn image_queries(&self) -> Vec<&str> {
        self.by_modality(Modality::Image)
    }

    fn by_modality(&self, m: Modality) -> Vec<&str> {
        self.queries
            .iter()
            .filter(|q| q.modality == m)
            .map(|q| q.query.as_str())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Where a sufficiency decision came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Model,
    /// Fixed-round policy; no model call.
    Policy,
    /// Forced by the round cap; no model call.
    Cap,
    /// Model reply unusable after re-ask; defaulted to Refine.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficiencyDecision {
    pub round: u32,
    pub value: Decision,
    pub rationale: String,
    pub source: DecisionSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualFeature {
    pub image: ContentHash,
    pub description: String,
}

/// Final generation prompt with the features and reference images it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedPrompt {
    pub source_prompt_id: String,
    pub prompt_text: String,
    pub textual_features: Vec<String>,
    pub visual_features: Vec<VisualFeature>,
    pub refined_images: Vec<ImageEvidence>,
}

impl EnrichedPrompt {
    pub fn image_hashes(&self) -> Vec<ContentHash> {
        self.refined_images.iter().map(|i| i.content_hash).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Bootstrapping,
    Looping,
    Refining,
    Generating,
    Done,
    Failed,
}

/// What one retrieval round (or the bootstrap, round 0) fetched and kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<QueryPlan>,
    pub raw_texts: Vec<ContentHash>,
    pub raw_images: Vec<ContentHash>,
    pub kept_texts: Vec<ContentHash>,
    pub kept_images: Vec<ContentHash>,
}

/// Resumable run state, checkpointed at every stage boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub prompt: UserPrompt,
    /// Persisted separately under `kb/`.
    #[serde(skip)]
    pub kb: KnowledgeBase,
    pub pending_questions: Vec<String>,
    /// Loop rounds started so far (bootstrap excluded).
    pub round: u32,
    pub decisions: Vec<SufficiencyDecision>,
    pub rounds: Vec<RoundRecord>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enriched: Option<EnrichedPrompt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub exchanges: Vec<ExchangeRecord>,
    pub warnings: Vec<String>,
}

impl RunState {
    pub fn new(prompt: UserPrompt) -> Self {
        Self {
            prompt,
            kb: KnowledgeBase::new(),
            pending_questions: Vec::new(),
            round: 0,
            decisions: Vec::new(),
            rounds: Vec::new(),
            status: RunStatus::Bootstrapping,
            enriched: None,
            failure: None,
            exchanges: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Retrieval iterations in the reporting convention: bootstrap plus loop rounds.
    pub fn loop_iterations(&self) -> u32 {
        1 + self.round
    }

    /// True once the last decision ends the loop.
    pub fn loop_finished(&self) -> bool {
        self.decisions.last().is_some_and(|d| d.value == Decision::Refine)
    }
}
