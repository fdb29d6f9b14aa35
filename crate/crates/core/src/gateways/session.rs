use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::backend::*;
use super::cassette::{fingerprint, Cassette, CassetteEntry, CassetteError, CassetteMode, Envelope, Outcome};
use super::clock::{Clock, SystemClock};
use super::ratelimit::RateLimiter;
use super::retry::RetryPolicy;
use super::structured::{parse_structured, ParseError, StructuredReply};
use super::templates::{InstructionRole, TemplateError, Templates};
use crate::accounting::{ExchangeRecord, Stage};
use crate::knowledge::{BlobStore, ContentHash};

/// Name of the fallback token estimator recorded in run manifests.
pub const TOKEN_ESTIMATOR: &str = "whitespace-v1";

/// Token estimate used when a backend reports no usage: whitespace-separated words.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{service} failed after {attempts} attempt(s): {message}")]
    Backend {
        service: ServiceKind,
        message: String,
        attempts: u32,
    },
    #[error(transparent)]
    Cassette(#[from] CassetteError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{role} reply unusable after re-ask: {error}")]
    Structured {
        role: InstructionRole,
        error: ParseError,
        raw: String,
    },
    #[error("blob {0} is not in the blob store")]
    MissingBlob(ContentHash),
}

impl GatewayError {
    pub fn is_determinism(&self) -> bool {
        matches!(self, GatewayError::Cassette(CassetteError::Mismatch { .. }))
    }
}

/// Shared service bindings: backends, clock, retry policy, rate limits, and templates.
///
/// One `Services` value can back many concurrent [`Session`]s.
pub struct Services {
    pub model: Arc<dyn ModelBackend>,
    pub search: Arc<dyn SearchBackend>,
    pub reader: Arc<dyn PageReader>,
    pub downloader: Arc<dyn ImageDownloader>,
    pub generator: Arc<dyn ImageGenerator>,
    pub clock: Arc<dyn Clock>,
    pub retry: RetryPolicy,
    pub templates: Templates,
    limiters: BTreeMap<ServiceKind, RateLimiter>,
}

impl Services {
    pub fn builder() -> ServicesBuilder {
        ServicesBuilder::default()
    }

    fn limiter(&self, service: ServiceKind) -> Option<&RateLimiter> {
        self.limiters.get(&service)
    }
}

pub struct ServicesBuilder {
    model: Arc<dyn ModelBackend>,
    search: Arc<dyn SearchBackend>,
    reader: Arc<dyn PageReader>,
    downloader: Arc<dyn ImageDownloader>,
    generator: Arc<dyn ImageGenerator>,
    clock: Arc<dyn Clock>,
    retry: RetryPolicy,
    templates: Templates,
    rate_limits: BTreeMap<ServiceKind, u32>,
}

impl Default for ServicesBuilder {
    fn default() -> Self {
        Self {
            model: Arc::new(Unbound),
            search: Arc::new(Unbound),
            reader: Arc::new(Unbound),
            downloader: Arc::new(Unbound),
            generator: Arc::new(StubGenerator),
            clock: Arc::new(SystemClock::new()),
            retry: RetryPolicy::default(),
            templates: Templates::default(),
            rate_limits: BTreeMap::new(),
        }
    }
}

impl ServicesBuilder {
    pub fn model(mut self, b: Arc<dyn ModelBackend>) -> Self {
        self.model = b;
        self
    }
    pub fn search(mut self, b: Arc<dyn SearchBackend>) -> Self {
        self.search = b;
        self
    }
    pub fn reader(mut self, b: Arc<dyn PageReader>) -> Self {
        self.reader = b;
        self
    }
    pub fn downloader(mut self, b: Arc<dyn ImageDownloader>) -> Self {
        self.downloader = b;
        self
    }
    pub fn generator(mut self, b: Arc<dyn ImageGenerator>) -> Self {
        self.generator = b;
        self
    }
    pub fn clock(mut self, c: Arc<dyn Clock>) -> Self {
        self.clock = c;
        self
    }
    pub fn retry(mut self, r: RetryPolicy) -> Self {
        self.retry = r;
        self
    }
    pub fn templates(mut self, t: Templates) -> Self {
        self.templates = t;
        self
    }
    pub fn rate_limit(mut self, service: ServiceKind, per_second: u32) -> Self {
        self.rate_limits.insert(service, per_second);
        self
    }

    pub fn build(self) -> Services {
        let limiters = self
            .rate_limits
            .into_iter()
            .filter(|(_, n)| *n > 0)
            .map(|(s, n)| (s, RateLimiter::new(n, self.clock.clone())))
            .collect();
        Services {
            model: self.model,
            search: self.search,
            reader: self.reader,
            downloader: self.downloader,
            generator: self.generator,
            clock: self.clock,
            retry: self.retry,
            templates: self.templates,
            limiters,
        }
    }
}

/// One model call as recorded for accounting and audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelExchange {
    pub role: InstructionRole,
    pub rendered_prompt: String,
    pub attached_image_keys: Vec<ContentHash>,
    pub raw_response: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
    pub attempts: u32,
    pub fingerprint: String,
}

/// Result of a structured call: the parsed value plus every exchange it took.
#[derive(Debug, Clone)]
pub struct Structured<T> {
    pub value: T,
    pub exchanges: Vec<ModelExchange>,
}

/// Outcome of a call whose parse failure is not fatal to the caller.
#[derive(Debug, Clone)]
pub struct Attempted<T> {
    pub value: Result<T, ParseError>,
    pub exchanges: Vec<ModelExchange>,
}

pub(crate) struct Exchanged<T> {
    pub value: T,
    pub latency_ms: u64,
    pub attempts: u32,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub fingerprint: String,
}

#[derive(Serialize)]
struct ModelRequest<'a> {
    role: InstructionRole,
    prompt: &'a str,
    images: &'a [ContentHash],
}

#[derive(Default)]
struct Meter {
    stage: Option<Stage>,
    round: u32,
    log: Vec<ExchangeRecord>,
}

/// Per-run gateway handle: owns the run's cassette, blob store, and exchange log.
pub struct Session {
    services: Arc<Services>,
    cassette: Mutex<Cassette>,
    blobs: BlobStore,
    meter: Mutex<Meter>,
    warnings: Mutex<Vec<String>>,
}

impl Session {
    pub fn new(services: Arc<Services>, cassette: Cassette, blobs: BlobStore) -> Self {
        Self {
            services,
            cassette: Mutex::new(cassette),
            blobs,
            meter: Mutex::new(Meter::default()),
            warnings: Mutex::new(Vec::new()),
        }
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.services
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn mode(&self) -> CassetteMode {
        self.cassette.lock().expect("cassette poisoned").mode()
    }

    /// Tag subsequent exchanges with a stage and loop round.
    pub fn set_stage(&self, stage: Option<Stage>, round: u32) {
        let mut m = self.meter.lock().expect("meter poisoned");
        m.stage = stage;
        m.round = round;
    }

    pub fn exchange_log(&self) -> Vec<ExchangeRecord> {
        self.meter.lock().expect("meter poisoned").log.clone()
    }

    /// Seed the exchange log with records from an earlier, resumed part of the run.
    pub fn restore_log(&self, records: Vec<ExchangeRecord>) {
        self.meter.lock().expect("meter poisoned").log = records;
    }

    pub fn warn(&self, message: impl Into<String>) {
        let message = message.into();
        tracing::warn!("{message}");
        self.warnings.lock().expect("warnings poisoned").push(message);
    }

    pub fn warnings(&self) -> Vec<String> {
        self.warnings.lock().expect("warnings poisoned").clone()
    }

    /// Drain warnings collected since the last call.
    pub fn take_warnings(&self) -> Vec<String> {
        std::mem::take(&mut *self.warnings.lock().expect("warnings poisoned"))
    }

    pub fn cassette_entries(&self) -> Vec<CassetteEntry> {
        self.cassette.lock().expect("cassette poisoned").entries().to_vec()
    }

    pub fn cassette_jsonl(&self) -> String {
        self.cassette.lock().expect("cassette poisoned").to_jsonl()
    }

    /// Replay entries that were never requested.
    pub fn unconsumed_entries(&self) -> Vec<CassetteEntry> {
        self.cassette
            .lock()
            .expect("cassette poisoned")
            .unconsumed()
            .into_iter()
            .cloned()
            .collect()
    }

    /// Route one request through the cassette layer.
    ///
    /// Replay serves the recorded envelope. Record and passthrough call the backend under
    /// the service's rate limit and retry policy; record also appends the outcome.
    pub(crate) fn exchange<Req, Resp>(
        &self,
        service: ServiceKind,
        label: &str,
        request: &Req,
        mut call: impl FnMut() -> Result<Resp, BackendError>,
        tokens: impl Fn(&Resp) -> (u64, u64),
    ) -> Result<Exchanged<Resp>, GatewayError>
    where
        Req: Serialize,
        Resp: Serialize + DeserializeOwned,
    {
        let fp = fingerprint(service, request);
        let mode = self.mode();
        let (envelope, tokens_in, tokens_out) = if mode == CassetteMode::Replay {
            let mut cassette = self.cassette.lock().expect("cassette poisoned");
            let entry = cassette.take(service, &fp, label)?;
            (entry.decode::<Resp>()?, entry.tokens_in, entry.tokens_out)
        } else {
            let clock = self.services.clock.clone();
            let start = clock.now_ms();
            let (result, attempts) = self.services.retry.run(clock.as_ref(), |_| {
                if let Some(l) = self.services.limiter(service) {
                    l.acquire();
                }
                call()
            });
            let latency_ms = clock.now_ms().saturating_sub(start);
            let (outcome, tin, tout) = match result {
                Ok(v) => {
                    let (i, o) = tokens(&v);
                    (Outcome::Ok(v), i, o)
                }
                Err(e) => (Outcome::Err(e.message), 0, 0),
            };
            let envelope = Envelope {
                latency_ms,
                attempts,
                outcome,
            };
            if mode == CassetteMode::Record {
                let entry = CassetteEntry {
                    service,
                    fingerprint: fp.clone(),
                    request_digest: label.to_string(),
                    response_b64: CassetteEntry::encode(&envelope),
                    tokens_in: tin,
                    tokens_out: tout,
                };
                self.cassette.lock().expect("cassette poisoned").push(entry);
            }
            (envelope, tin, tout)
        };

        let ok = matches!(envelope.outcome, Outcome::Ok(_));
        {
            let mut m = self.meter.lock().expect("meter poisoned");
            let (stage, round) = (m.stage, m.round);
            m.log.push(ExchangeRecord {
                service,
                label: label.to_string(),
                stage,
                round,
                tokens_in,
                tokens_out,
                latency_ms: envelope.latency_ms,
                ok,
            });
        }
        match envelope.outcome {
            Outcome::Ok(value) => Ok(Exchanged {
                value,
                latency_ms: envelope.latency_ms,
                attempts: envelope.attempts,
                tokens_in,
                tokens_out,
                fingerprint: fp,
            }),
            Outcome::Err(message) => Err(GatewayError::Backend {
                service,
                message,
                attempts: envelope.attempts,
            }),
        }
    }

    pub(crate) fn image_inputs(&self, keys: &[ContentHash]) -> Result<Vec<ImageInput>, GatewayError> {
        keys.iter()
            .map(|k| {
                let bytes = self.blobs.get(k).ok_or(GatewayError::MissingBlob(*k))?;
                let mime = super::retrieval::sniff_mime(&bytes).unwrap_or("application/octet-stream");
                Ok(ImageInput {
                    hash: *k,
                    mime: mime.to_string(),
                    bytes,
                })
            })
            .collect()
    }

    /// Render `role`'s template with `vars` and send it with the attached images.
    pub fn model_invoke(
        &self,
        role: InstructionRole,
        vars: &[(&str, &str)],
        images: &[ContentHash],
    ) -> Result<ModelExchange, GatewayError> {
        let prompt = self.services.templates.render(role, vars)?;
        self.send_model(role, prompt, images)
    }

    fn send_model(
        &self,
        role: InstructionRole,
        prompt: String,
        images: &[ContentHash],
    ) -> Result<ModelExchange, GatewayError> {
        // attachments are resolved even in replay so that missing blobs surface identically
        let inputs = self.image_inputs(images)?;
        let request = ModelRequest {
            role,
            prompt: &prompt,
            images,
        };
        let backend = self.services.model.clone();
        let call = ModelCall {
            role,
            prompt: prompt.clone(),
            images: inputs,
        };
        let ex = self.exchange(
            ServiceKind::Model,
            role.name(),
            &request,
            || backend.complete(&call),
            |reply: &ModelReply| {
                (
                    reply.input_tokens.unwrap_or_else(|| estimate_tokens(&prompt)),
                    reply.output_tokens.unwrap_or_else(|| estimate_tokens(&reply.text)),
                )
            },
        )?;
        Ok(ModelExchange {
            role,
            rendered_prompt: prompt.clone(),
            attached_image_keys: images.to_vec(),
            raw_response: ex.value.text,
            input_tokens: ex.tokens_in,
            output_tokens: ex.tokens_out,
            latency_ms: ex.latency_ms,
            attempts: ex.attempts,
            fingerprint: ex.fingerprint,
        })
    }

    /// Call the model and parse its reply with `parse`, re-asking once on failure.
    /// Transport errors propagate; a second parse failure is returned in `value`.
    pub fn invoke_parsed<T>(
        &self,
        role: InstructionRole,
        vars: &[(&str, &str)],
        images: &[ContentHash],
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<Attempted<T>, GatewayError> {
        let first = self.model_invoke(role, vars, images)?;
        let err = match parse(&first.raw_response) {
            Ok(v) => {
                return Ok(Attempted {
                    value: Ok(v),
                    exchanges: vec![first],
                })
            }
            Err(e) => e,
        };
        tracing::debug!(%role, error = %err, "re-asking after unusable reply");
        let reask = format!(
            "{}\n\nYour previous reply could not be used ({err}). Reply again with only the JSON object in the requested format.",
            first.rendered_prompt
        );
        let second = self.send_model(role, reask, images)?;
        let value = parse(&second.raw_response);
        Ok(Attempted {
            value,
            exchanges: vec![first, second],
        })
    }

    /// Structured call with schema validation plus a caller-supplied semantic `check`.
    pub fn invoke_structured<T: StructuredReply>(
        &self,
        role: InstructionRole,
        vars: &[(&str, &str)],
        images: &[ContentHash],
        check: impl Fn(&T) -> Result<(), ParseError>,
    ) -> Result<Structured<T>, GatewayError> {
        let attempted = self.invoke_parsed(role, vars, images, |raw| {
            let v = parse_structured::<T>(raw)?;
            check(&v)?;
            Ok(v)
        })?;
        match attempted.value {
            Ok(value) => Ok(Structured {
                value,
                exchanges: attempted.exchanges,
            }),
            Err(error) => Err(GatewayError::Structured {
                role,
                error,
                raw: attempted
                    .exchanges
                    .last()
                    .map(|e| e.raw_response.clone())
                    .unwrap_or_default(),
            }),
        }
    }
}

/// Check that every 1-based index in `indices` lies in `1..=len`.
pub fn check_indices(field: &str, indices: &[usize], len: usize) -> Result<(), ParseError> {
    for (i, &idx) in indices.iter().enumerate() {
        if idx == 0 || idx > len {
            return Err(ParseError::field(
                format!("{field}[{i}]"),
                format!("index {idx} out of range 1..={len}"),
            ));
        }
    }
    Ok(())
}
