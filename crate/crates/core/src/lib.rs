//! Agentic open multimodal retrieval for factual image generation.
//!
//! The crate is split along the engine's seams:
//!
//! * [`knowledge`]: prompts, evidence, and the content-addressed knowledge base.
//! * [`gateways`]: replayable clients for the reasoning model, web search, page reader,
//!   image download, and image generation, with retries, rate limiting, and cassettes.
//! * [`pipeline`]: the bootstrap / plan / retrieve / accumulate / decide loop followed by
//!   refinement, prompt extension, and generation, with per-stage cost accounting.
//! * [`fig_eval`]: QA-based judging, macro-averaged accuracy, retrieval alignment, and
//!   rank-correlation checks.
//! * [`scripted`]: deterministic in-process backends for tests and fixtures.

pub mod accounting;
pub mod fig_eval;
pub mod fsutil;
pub mod gateways;
pub mod knowledge;
pub mod pipeline;
pub mod scripted;
