//! Replayable clients for the external services a run depends on.

mod backend;
mod cassette;
mod clock;
pub mod http;
mod ratelimit;
mod retrieval;
mod retry;
mod session;
mod structured;
mod templates;

pub use backend::*;
pub use cassette::{
    fingerprint, parse_jsonl, to_jsonl, Cassette, CassetteEntry, CassetteError, CassetteMode, CassetteSpec,
    Envelope, Outcome,
};
pub use clock::{Clock, SystemClock, VirtualClock};
pub use ratelimit::RateLimiter;
pub use retrieval::{decode_image, sniff_mime, ArtifactManifest, GenerationArtifact, ARTIFACT_MANIFEST, SEARCH_TOP_K};
pub use retry::RetryPolicy;
pub use session::{
    check_indices, estimate_tokens, Attempted, GatewayError, ModelExchange, Services, ServicesBuilder, Session,
    Structured, TOKEN_ESTIMATOR,
};
pub use structured::*;
pub use templates::{InstructionRole, TemplateError, Templates};
