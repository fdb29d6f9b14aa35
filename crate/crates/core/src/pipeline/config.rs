//! Run configuration, loaded from TOML and adjusted with `key=value` overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::gateways::http::{HttpDownloader, HttpImageGenerator, JinaReader, OpenAiChat, SerperSearch};
use crate::gateways::{CassetteMode, RetryPolicy, ServiceKind, Services, Templates};
use crate::knowledge::MIN_DIGEST_CHARS;

/// Environment variables holding service credentials.
pub const ENV_SEARCH_KEY: &str = "ORIG_SEARCH_KEY";
pub const ENV_MODEL_KEY: &str = "ORIG_MODEL_KEY";
pub const ENV_READER_KEY: &str = "ORIG_READER_KEY";
pub const ENV_IMAGEGEN_KEY: &str = "ORIG_IMAGEGEN_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid override {raw:?}: {message}")]
    Override { raw: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// How the loop decides whether to run another round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterationPolicy {
    /// Ask the model after every round.
    Adaptive,
    /// Run exactly `n` loop rounds without asking.
    FixedRounds(u32),
}

impl fmt::Display for IterationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IterationPolicy::Adaptive => f.write_str("adaptive"),
            IterationPolicy::FixedRounds(n) => write!(f, "fixed:{n}"),
        }
    }
}

impl FromStr for IterationPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("adaptive") {
            return Ok(IterationPolicy::Adaptive);
        }
        let n = s
            .strip_prefix("fixed:")
            .or_else(|| s.strip_prefix("fixed(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| format!("expected adaptive or fixed:<n>, got {s:?}"))?;
        let n: u32 = n.trim().parse().map_err(|_| format!("invalid round count in {s:?}"))?;
        if n == 0 {
            return Err("fixed policy needs at least 1 round".into());
        }
        Ok(IterationPolicy::FixedRounds(n))
    }
}

impl Serialize for IterationPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IterationPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Service endpoints and transport settings for live runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub model: String,
    pub model_base_url: String,
    pub search_base_url: String,
    pub reader_base_url: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imagegen_url: Option<String>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    /// Requests per second, keyed by service name (`model`, `text_search`, ...).
    pub rate_limits: BTreeMap<ServiceKind, u32>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            model_base_url: OpenAiChat::DEFAULT_BASE.into(),
            search_base_url: SerperSearch::DEFAULT_BASE.into(),
            reader_base_url: JinaReader::DEFAULT_BASE.into(),
            imagegen_url: None,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            rate_limits: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub policy: IterationPolicy,
    /// Cap on loop rounds, not counting bootstrap.
    pub max_rounds: u32,
    pub keep_pages: usize,
    pub keep_images: usize,
    pub digest_max_chars: usize,
    /// Characters of each candidate page shown to the text filter.
    pub candidate_chars: usize,
    pub skip_generation: bool,
    /// `record:<path>`, `replay:<path>` or `off`.
    pub cassette: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    pub gateways: GatewayConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            policy: IterationPolicy::Adaptive,
            max_rounds: 3,
            keep_pages: 2,
            keep_images: 5,
            digest_max_chars: 12_000,
            candidate_chars: 4_000,
            skip_generation: false,
            cassette: "off".into(),
            templates_dir: None,
            gateways: GatewayConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            message: format!("at `{}`: {}", e.path(), e.inner()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply `key=value` overrides by dotted path. Values are read as TOML literals when
    /// they parse as one, otherwise as strings. Unknown keys are rejected.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut root = toml::Table::try_from(&*self).expect("config serializes to a table");
        for raw in overrides {
            let raw = raw.as_ref();
            let bad = |message: String| ConfigError::Override {
                raw: raw.to_string(),
                message,
            };
            let (key, value) = raw.split_once('=').ok_or_else(|| bad("expected key=value".into()))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(bad("empty key".into()));
            }
            let value = parse_literal(value.trim());
            let mut table = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                table = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| bad(format!("`{part}` is not a table")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), value);
            let probe: Result<RunConfig, _> =
                serde_path_to_error::deserialize(toml::Value::Table(root.clone()));
            if let Err(e) = probe {
                return Err(bad(format!("at `{}`: {}", e.path(), e.inner())));
            }
        }
        let cfg: RunConfig = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| {
            ConfigError::Invalid(e.to_string())
        })?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.max_rounds == 0 {
            return invalid("max_rounds must be at least 1".into());
        }
        if let IterationPolicy::FixedRounds(n) = self.policy {
            if n > self.max_rounds {
                return invalid(format!("policy fixed:{n} exceeds max_rounds = {}", self.max_rounds));
            }
        }
        if self.keep_pages == 0 || self.keep_images == 0 {
            return invalid("keep_pages and keep_images must be at least 1".into());
        }
        if self.digest_max_chars < MIN_DIGEST_CHARS {
            return invalid(format!("digest_max_chars must be at least {MIN_DIGEST_CHARS}"));
        }
        if self.candidate_chars == 0 {
            return invalid("candidate_chars must be at least 1".into());
        }
        self.cassette
            .parse::<crate::gateways::CassetteSpec>()
            .map_err(|e| ConfigError::Invalid(format!("cassette: {e}")))?;
        Ok(())
    }

    /// Live service bindings for this configuration. Credentials come from the
    /// environment; a service without a key stays unbound and fails on first use.
    /// Replay runs never reach a backend, so every service is left unbound.
    pub fn services(&self, mode: CassetteMode) -> Result<Services, ConfigError> {
        let mut templates = Templates::default();
        if let Some(dir) = &self.templates_dir {
            templates
                .load_overrides(dir)
                .map_err(|e| ConfigError::Invalid(format!("templates: {e}")))?;
        }
        let g = &self.gateways;
        let mut builder = Services::builder().templates(templates).retry(g.retry);
        for (&service, &n) in &g.rate_limits {
            builder = builder.rate_limit(service, n);
        }
        if mode == CassetteMode::Replay {
            return Ok(builder.build());
        }
        let timeout = Duration::from_secs(g.timeout_secs.max(1));
        let env = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        if let Some(key) = env(ENV_MODEL_KEY) {
            builder = builder.model(Arc::new(OpenAiChat::new(&g.model_base_url, key, &g.model, timeout)));
        }
        if let Some(key) = env(ENV_SEARCH_KEY) {
            builder = builder.search(Arc::new(SerperSearch::new(&g.search_base_url, key, timeout)));
        }
        builder = builder
            .reader(Arc::new(JinaReader::new(&g.reader_base_url, env(ENV_READER_KEY), timeout)))
            .downloader(Arc::new(HttpDownloader::new(timeout)));
        if let Some(url) = &g.imagegen_url {
            builder = builder.generator(Arc::new(HttpImageGenerator::new(url, env(ENV_IMAGEGEN_KEY), timeout)));
        }
        Ok(builder.build())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
