//! Pipeline stage taxonomy and the per-exchange log that cost reports are built from.

use serde::{Deserialize, Serialize};

use crate::gateways::ServiceKind;

/// Stages whose cost is reported. `Generation` is tracked but sits outside the stage table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Bootstrap,
    QueryPlanning,
    KnowledgeAccumulation,
    FineGrainedRefine,
    PromptExtension,
    Generation,
}

impl Stage {
    /// Rows of the stage cost table, in pipeline order.
    pub const TABLE: [Stage; 5] = [
        Stage::Bootstrap,
        Stage::QueryPlanning,
        Stage::KnowledgeAccumulation,
        Stage::FineGrainedRefine,
        Stage::PromptExtension,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Bootstrap => "Bootstrap",
            Stage::QueryPlanning => "Query Planning",
            Stage::KnowledgeAccumulation => "Knowledge Accumulation",
            Stage::FineGrainedRefine => "Fine-grained Refine",
            Stage::PromptExtension => "Prompt Extension",
            Stage::Generation => "Generation",
        }
    }
}

/// One completed exchange as seen by the accounting layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub service: ServiceKind,
    pub label: String,
    pub stage: Option<Stage>,
    pub round: u32,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_ms: u64,
    pub ok: bool,
}
