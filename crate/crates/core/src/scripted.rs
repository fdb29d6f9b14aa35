//! Deterministic in-process backends.
//!
//! Used by the test suites and for recording fixture cassettes. Every backend can share a
//! [`VirtualClock`] and advances it by a fixed latency per call, so recorded latencies are
//! reproducible.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::Cursor;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, TimeZone, Utc};
use sha2::{Digest, Sha256};

use crate::gateways::*;

pub type ModelHandler = Arc<dyn Fn(&ModelCall) -> Result<ModelReply, BackendError> + Send + Sync>;

fn tick(clock: &Option<VirtualClock>, ms: u64) {
    if let Some(c) = clock {
        c.advance(ms);
    }
}

/// Lines `1. ...`, `2. ...` following the first "numbered from 1" marker, counted while
/// the numbering stays consecutive.
pub fn count_numbered(prompt: &str) -> usize {
    let Some(start) = prompt.find("numbered from 1") else {
        return 0;
    };
    let mut expected = 1;
    for line in prompt[start..].lines().skip(1) {
        let Some((num, _)) = line.split_once(". ") else { continue };
        match num.parse::<usize>() {
            Ok(n) if n == expected => expected += 1,
            Ok(_) => break,
            Err(_) => continue,
        }
    }
    expected - 1
}

/// Value after `label` on its line, e.g. the prompt after "Image prompt: ".
pub fn line_value<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(label))
        .map(str::trim)
}

fn json_reply(v: serde_json::Value) -> Result<ModelReply, BackendError> {
    Ok(ModelReply::text(v.to_string()))
}

fn one_to(n: usize) -> Vec<usize> {
    (1..=n).collect()
}

/// Model backend answering from per-role reply queues, falling back to per-role handlers.
///
/// The default handlers cooperate with the pipeline: rank snippets in order, keep every
/// candidate, plan no queries, decide Refine, keep every image, and answer judges True.
pub struct ScriptedModel {
    queues: Mutex<HashMap<InstructionRole, VecDeque<Result<ModelReply, BackendError>>>>,
    handlers: HashMap<InstructionRole, ModelHandler>,
    calls: Mutex<Vec<ModelCall>>,
    clock: Option<VirtualClock>,
    latency_ms: u64,
    usage: Option<(u64, u64)>,
}

impl Default for ScriptedModel {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedModel {
    pub fn new() -> Self {
        let mut handlers: HashMap<InstructionRole, ModelHandler> = HashMap::new();
        handlers.insert(
            InstructionRole::SnippetRank,
            Arc::new(|c| json_reply(serde_json::json!({ "ranking": one_to(count_numbered(&c.prompt)) }))),
        );
        handlers.insert(
            InstructionRole::QueryPlanning,
            Arc::new(|_| json_reply(serde_json::json!({ "sub_questions": [], "queries": [] }))),
        );
        handlers.insert(
            InstructionRole::TextFilter,
            Arc::new(|c| json_reply(serde_json::json!({ "keep": one_to(count_numbered(&c.prompt)) }))),
        );
        handlers.insert(
            InstructionRole::ImageFilter,
            Arc::new(|c| json_reply(serde_json::json!({ "keep": one_to(c.images.len()) }))),
        );
        handlers.insert(
            InstructionRole::Sufficiency,
            Arc::new(|_| json_reply(serde_json::json!({ "decision": "Refine", "rationale": "enough evidence" }))),
        );
        handlers.insert(
            InstructionRole::ContentRefine,
            Arc::new(|c| {
                json_reply(serde_json::json!({
                    "textual_features": ["primary subject matches the retrieved description"],
                    "keep_images": one_to(c.images.len()),
                }))
            }),
        );
        handlers.insert(
            InstructionRole::VisualRefine,
            Arc::new(|c| {
                let feats: Vec<_> = (1..=c.images.len())
                    .map(|i| serde_json::json!({ "image": i, "feature": format!("overall shape in reference {i}") }))
                    .collect();
                json_reply(serde_json::json!({ "visual_features": feats }))
            }),
        );
        handlers.insert(
            InstructionRole::PromptExtend,
            Arc::new(|c| {
                let base = line_value(&c.prompt, "Original prompt:").unwrap_or("the subject");
                json_reply(serde_json::json!({
                    "prompt": format!("{base}, rendered faithfully to {} reference image(s)", c.images.len())
                }))
            }),
        );
        handlers.insert(InstructionRole::JudgeQuestion, Arc::new(|_| json_reply(serde_json::json!({ "verdict": "True" }))));
        handlers.insert(InstructionRole::JudgeAlignment, Arc::new(|_| json_reply(serde_json::json!({ "verdict": "True" }))));
        Self {
            queues: Mutex::new(HashMap::new()),
            handlers,
            calls: Mutex::new(Vec::new()),
            clock: None,
            latency_ms: 40,
            usage: None,
        }
    }

    pub fn with_clock(mut self, clock: VirtualClock, latency_ms: u64) -> Self {
        self.clock = Some(clock);
        self.latency_ms = latency_ms;
        self
    }

    /// Report fixed token usage instead of leaving it to the estimator.
    pub fn with_usage(mut self, input: u64, output: u64) -> Self {
        self.usage = Some((input, output));
        self
    }

    pub fn on(mut self, role: InstructionRole, handler: impl Fn(&ModelCall) -> Result<ModelReply, BackendError> + Send + Sync + 'static) -> Self {
        self.handlers.insert(role, Arc::new(handler));
        self
    }

    /// Queue a reply for `role`; queued replies are served before the handler.
    pub fn push(&self, role: InstructionRole, text: impl Into<String>) {
        self.push_result(role, Ok(ModelReply::text(text)));
    }

    pub fn push_result(&self, role: InstructionRole, reply: Result<ModelReply, BackendError>) {
        self.queues
            .lock()
            .expect("queues poisoned")
            .entry(role)
            .or_default()
            .push_back(reply);
    }

    pub fn calls(&self) -> Vec<ModelCall> {
        self.calls.lock().expect("calls poisoned").clone()
    }

    pub fn roles_called(&self) -> Vec<InstructionRole> {
        self.calls().iter().map(|c| c.role).collect()
    }

    pub fn count(&self, role: InstructionRole) -> usize {
        self.calls().iter().filter(|c| c.role == role).count()
    }
}

impl ModelBackend for ScriptedModel {
    fn complete(&self, call: &ModelCall) -> Result<ModelReply, BackendError> {
        tick(&self.clock, self.latency_ms);
        self.calls.lock().expect("calls poisoned").push(call.clone());
        let queued = self
            .queues
            .lock()
            .expect("queues poisoned")
            .get_mut(&call.role)
            .and_then(VecDeque::pop_front);
        let mut reply = match queued {
            Some(r) => r?,
            None => match self.handlers.get(&call.role) {
                Some(h) => h(call)?,
                None => return Err(BackendError::permanent(format!("no script for role {}", call.role))),
            },
        };
        if let Some((i, o)) = self.usage {
            reply.input_tokens = reply.input_tokens.or(Some(i));
            reply.output_tokens = reply.output_tokens.or(Some(o));
        }
        Ok(reply)
    }
}

/// Lowercase alphanumeric slug used in synthetic URLs.
pub fn slug(text: &str) -> String {
    let s: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

/// Search backend with fixed results per query. Unknown queries get `synthetic` hits
/// (`https://web.example/<slug>/<i>` and `https://img.example/<slug>/<i>.png`).
pub struct ScriptedSearch {
    text: HashMap<String, Vec<SearchHit>>,
    images: HashMap<String, Vec<SearchHit>>,
    failures: Mutex<HashMap<String, u32>>,
    synthetic: (usize, usize),
    clock: Option<VirtualClock>,
    latency_ms: u64,
    calls: Mutex<Vec<(ServiceKind, String)>>,
}

impl Default for ScriptedSearch {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedSearch {
    pub fn new() -> Self {
        Self {
            text: HashMap::new(),
            images: HashMap::new(),
            failures: Mutex::new(HashMap::new()),
            synthetic: (10, 10),
            clock: None,
            latency_ms: 300,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn with_clock(mut self, clock: VirtualClock, latency_ms: u64) -> Self {
        self.clock = Some(clock);
        self.latency_ms = latency_ms;
        self
    }

    /// Number of synthetic text and image hits for unscripted queries.
    pub fn synthetic(mut self, text: usize, images: usize) -> Self {
        self.synthetic = (text, images);
        self
    }

    pub fn text(mut self, query: &str, hits: Vec<SearchHit>) -> Self {
        self.text.insert(query.to_string(), hits);
        self
    }

    pub fn images(mut self, query: &str, hits: Vec<SearchHit>) -> Self {
        self.images.insert(query.to_string(), hits);
        self
    }

    /// Fail the next `times` searches for `query` with a retryable error.
    pub fn fail(self, query: &str, times: u32) -> Self {
        self.failures.lock().expect("failures poisoned").insert(query.to_string(), times);
        self
    }

    pub fn calls(&self) -> Vec<(ServiceKind, String)> {
        self.calls.lock().expect("calls poisoned").clone()
    }

    fn check_failure(&self, query: &str) -> Result<(), BackendError> {
        let mut f = self.failures.lock().expect("failures poisoned");
        if let Some(n) = f.get_mut(query) {
            if *n > 0 {
                *n -= 1;
                return Err(BackendError::transient(format!("search for {query:?} timed out")));
            }
        }
        Ok(())
    }

    pub fn synthetic_text_hits(query: &str, n: usize) -> Vec<SearchHit> {
        let s = slug(query);
        (1..=n)
            .map(|i| {
                SearchHit::text(
                    i as u32,
                    format!("https://web.example/{s}/{i}"),
                    format!("{query} result {i}"),
                    format!("Snippet {i} about {query}."),
                )
            })
            .collect()
    }

    pub fn synthetic_image_hits(query: &str, n: usize) -> Vec<SearchHit> {
        let s = slug(query);
        (1..=n)
            .map(|i| {
                SearchHit::image(
                    i as u32,
                    format!("https://web.example/{s}/gallery/{i}"),
                    format!("{query} photo {i}"),
                    format!("https://img.example/{s}/{i}.png"),
                )
            })
            .collect()
    }
}

impl SearchBackend for ScriptedSearch {
    fn search_text(&self, query: &str, num: usize) -> Result<Vec<SearchHit>, BackendError> {
        tick(&self.clock, self.latency_ms);
        self.calls.lock().expect("calls poisoned").push((ServiceKind::TextSearch, query.to_string()));
        self.check_failure(query)?;
        let mut hits = self
            .text
            .get(query)
            .cloned()
            .unwrap_or_else(|| Self::synthetic_text_hits(query, self.synthetic.0));
        hits.truncate(num);
        Ok(hits)
    }

    fn search_images(&self, query: &str, num: usize) -> Result<Vec<SearchHit>, BackendError> {
        tick(&self.clock, self.latency_ms);
        self.calls.lock().expect("calls poisoned").push((ServiceKind::ImageSearch, query.to_string()));
        self.check_failure(query)?;
        let mut hits = self
            .images
            .get(query)
            .cloned()
            .unwrap_or_else(|| Self::synthetic_image_hits(query, self.synthetic.1));
        hits.truncate(num);
        Ok(hits)
    }
}

fn fixed_time(clock: &Option<VirtualClock>) -> DateTime<Utc> {
    let base = Utc.with_ymd_and_hms(2025, 10, 1, 12, 0, 0).unwrap();
    base + chrono::Duration::milliseconds(clock.as_ref().map_or(0, |c| c.now_ms()) as i64)
}

/// Page reader returning scripted or synthetic markdown. Dead URLs fail with 404.
pub struct ScriptedReader {
    pages: HashMap<String, String>,
    dead: HashSet<String>,
    clock: Option<VirtualClock>,
    latency_ms: u64,
    calls: Mutex<Vec<String>>,
}

impl Default for ScriptedReader {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedReader {
    pub fn new() -> Self {
        Self {
            pages: HashMap::new(),
            dead: HashSet::new(),
            clock: None,
            latency_ms: 500,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn with_clock(mut self, clock: VirtualClock, latency_ms: u64) -> Self {
        self.clock = Some(clock);
        self.latency_ms = latency_ms;
        self
    }

    pub fn page(mut self, url: &str, content: &str) -> Self {
        self.pages.insert(url.to_string(), content.to_string());
        self
    }

    pub fn dead(mut self, url: &str) -> Self {
        self.dead.insert(url.to_string());
        self
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().expect("calls poisoned").clone()
    }

    pub fn synthetic_page(url: &str) -> String {
        format!("# Page {url}\n\nReference material published at {url}. It lists dimensions, colors and dates.\n")
    }
}

impl PageReader for ScriptedReader {
    fn read(&self, url: &str) -> Result<PageContent, BackendError> {
        tick(&self.clock, self.latency_ms);
        self.calls.lock().expect("calls poisoned").push(url.to_string());
        if self.dead.contains(url) {
            return Err(BackendError::from_status(404, "not found"));
        }
        let content = self.pages.get(url).cloned().unwrap_or_else(|| Self::synthetic_page(url));
        Ok(PageContent {
            content,
            fetched_at: fixed_time(&self.clock),
        })
    }
}

/// Small PNG whose pixels derive from `seed`; distinct seeds give distinct bytes.
pub fn png_bytes(seed: &str) -> Vec<u8> {
    let d = Sha256::digest(seed.as_bytes());
    let img = image::RgbImage::from_fn(3, 2, |x, y| {
        let i = ((y * 3 + x) * 3) as usize;
        image::Rgb([d[i % 32], d[(i + 1) % 32], d[(i + 2) % 32]])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("png encodes");
    out.into_inner()
}

/// Image downloader serving scripted or synthetic PNGs. Dead URLs return 404; garbage
/// URLs return undecodable bytes.
pub struct ScriptedDownloader {
    bodies: HashMap<String, Vec<u8>>,
    dead: HashSet<String>,
    clock: Option<VirtualClock>,
    latency_ms: u64,
    calls: Mutex<Vec<String>>,
}

impl Default for ScriptedDownloader {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedDownloader {
    pub fn new() -> Self {
        Self {
            bodies: HashMap::new(),
            dead: HashSet::new(),
            clock: None,
            latency_ms: 150,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn with_clock(mut self, clock: VirtualClock, latency_ms: u64) -> Self {
        self.clock = Some(clock);
        self.latency_ms = latency_ms;
        self
    }

    pub fn body(mut self, url: &str, bytes: Vec<u8>) -> Self {
        self.bodies.insert(url.to_string(), bytes);
        self
    }

    pub fn dead(mut self, url: &str) -> Self {
        self.dead.insert(url.to_string());
        self
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().expect("calls poisoned").clone()
    }
}

impl ImageDownloader for ScriptedDownloader {
    fn download(&self, url: &str) -> Result<Download, BackendError> {
        tick(&self.clock, self.latency_ms);
        self.calls.lock().expect("calls poisoned").push(url.to_string());
        if self.dead.contains(url) {
            return Ok(Download {
                status: 404,
                content_type: None,
                bytes: Vec::new(),
            });
        }
        let bytes = self.bodies.get(url).cloned().unwrap_or_else(|| png_bytes(url));
        Ok(Download {
            status: 200,
            content_type: Some("image/png".into()),
            bytes,
        })
    }
}

/// Generator returning fixed bytes, or failing when built with [`ScriptedGenerator::failing`].
pub struct ScriptedGenerator {
    bytes: Option<Vec<u8>>,
    clock: Option<VirtualClock>,
    latency_ms: u64,
}

impl ScriptedGenerator {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self {
            bytes: Some(bytes),
            clock: None,
            latency_ms: 4000,
        }
    }

    pub fn failing() -> Self {
        Self {
            bytes: None,
            clock: None,
            latency_ms: 4000,
        }
    }

    pub fn with_clock(mut self, clock: VirtualClock, latency_ms: u64) -> Self {
        self.clock = Some(clock);
        self.latency_ms = latency_ms;
        self
    }
}

impl ImageGenerator for ScriptedGenerator {
    fn generate(&self, _prompt: &str, _references: &[ImageInput]) -> Result<GeneratedImage, BackendError> {
        tick(&self.clock, self.latency_ms);
        match &self.bytes {
            Some(b) => Ok(GeneratedImage {
                backend: "scripted".into(),
                bytes: Some(b.clone()),
                mime: None,
            }),
            None => Err(BackendError::permanent("generator rejected the request")),
        }
    }
}

/// A full set of scripted services sharing one virtual clock.
pub struct Scenario {
    pub clock: VirtualClock,
    pub model: Arc<ScriptedModel>,
    pub search: Arc<ScriptedSearch>,
    pub reader: Arc<ScriptedReader>,
    pub downloader: Arc<ScriptedDownloader>,
    pub generator: Arc<dyn ImageGenerator>,
    pub retry: RetryPolicy,
}

impl Scenario {
    /// Cooperative defaults with the given model script.
    pub fn new(model: ScriptedModel) -> Self {
        let clock = VirtualClock::new();
        Self::build(
            clock.clone(),
            model.with_clock(clock.clone(), 40),
            ScriptedSearch::new().with_clock(clock.clone(), 300),
            ScriptedReader::new().with_clock(clock.clone(), 500),
            ScriptedDownloader::new().with_clock(clock.clone(), 150),
        )
    }

    /// Assemble from parts. Parts should share `clock` for reproducible latencies.
    pub fn build(
        clock: VirtualClock,
        model: ScriptedModel,
        search: ScriptedSearch,
        reader: ScriptedReader,
        downloader: ScriptedDownloader,
    ) -> Self {
        Self {
            model: Arc::new(model),
            search: Arc::new(search),
            reader: Arc::new(reader),
            downloader: Arc::new(downloader),
            generator: Arc::new(ScriptedGenerator::new(png_bytes("generated")).with_clock(clock.clone(), 4000)),
            retry: RetryPolicy {
                max_attempts: 3,
                initial_backoff_ms: 200,
            },
            clock,
        }
    }

    pub fn generator(mut self, g: impl ImageGenerator + 'static) -> Self {
        self.generator = Arc::new(g);
        self
    }

    pub fn services(&self) -> Arc<Services> {
        Arc::new(
            Services::builder()
                .model(self.model.clone())
                .search(self.search.clone())
                .reader(self.reader.clone())
                .downloader(self.downloader.clone())
                .generator(self.generator.clone())
                .clock(Arc::new(self.clock.clone()))
                .retry(self.retry)
                .build(),
        )
    }
}

/// Services for replay-only sessions: nothing is bound, so any cache miss fails loudly.
pub fn replay_services() -> Arc<Services> {
    Arc::new(Services::builder().clock(Arc::new(VirtualClock::new())).build())
}
