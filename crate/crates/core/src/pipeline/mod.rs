//! The retrieval loop: bootstrap, then plan / retrieve / accumulate / decide rounds,
//! then content refinement, prompt extension, and generation.

mod config;
mod cost;
mod engine;
mod run;
mod types;

pub use config::{
    ConfigError, GatewayConfig, IterationPolicy, RunConfig, ENV_IMAGEGEN_KEY, ENV_MODEL_KEY, ENV_READER_KEY,
    ENV_SEARCH_KEY,
};
pub use cost::{CostReport, CostTotals, GenerationCost, RoundCost, StageCost};
pub use engine::{bound_queries, Pipeline, PipelineError};
pub use run::{
    resume, run, RunBundle, RunDir, RunManifest, ARTIFACT_DIR, CASSETTE_FILE, COST_FILE, COST_TABLE_FILE,
    ENRICHED_FILE, KB_DIR, RUN_MANIFEST_FILE, STATE_FILE,
};
pub use types::*;
