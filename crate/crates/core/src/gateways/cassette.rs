//! Record/replay transcript of every external exchange in a run.
//!
//! File format (`cassette.jsonl`): one JSON object per line with the fields
//! `service`, `fingerprint`, `request_digest`, `response_b64`, `tokens_in`, `tokens_out`.
//! `response_b64` is the base64 of an envelope `{"latency_ms", "attempts", "outcome"}`
//! where `outcome` is `{"ok": <normalized response>}` or `{"err": "<message>"}`.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::ServiceKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    Record,
    Replay,
    Passthrough,
}

/// Cassette selection as written on the command line: `record:<path>`, `replay:<path>`, `off`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CassetteSpec {
    Record(PathBuf),
    Replay(PathBuf),
    Off,
}

impl FromStr for CassetteSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "off" {
            return Ok(CassetteSpec::Off);
        }
        let (mode, path) = s
            .split_once(':')
            .ok_or_else(|| format!("expected record:<path>, replay:<path> or off, got {s:?}"))?;
        if path.is_empty() {
            return Err(format!("missing path in cassette spec {s:?}"));
        }
        match mode {
            "record" => Ok(CassetteSpec::Record(path.into())),
            "replay" => Ok(CassetteSpec::Replay(path.into())),
            _ => Err(format!("unknown cassette mode {mode:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CassetteEntry {
    pub service: ServiceKind,
    pub fingerprint: String,
    pub request_digest: String,
    pub response_b64: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome<T> {
    Ok(T),
    Err(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub latency_ms: u64,
    pub attempts: u32,
    pub outcome: Outcome<T>,
}

impl CassetteEntry {
    pub fn encode<T: Serialize>(envelope: &Envelope<T>) -> String {
        let bytes = serde_json::to_vec(envelope).expect("envelope serializes");
        base64::engine::general_purpose::STANDARD.encode(bytes)
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<Envelope<T>, CassetteError> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.response_b64)
            .map_err(|e| CassetteError::Payload {
                fingerprint: self.fingerprint.clone(),
                message: e.to_string(),
            })?;
        serde_json::from_slice(&bytes).map_err(|e| CassetteError::Payload {
            fingerprint: self.fingerprint.clone(),
            message: e.to_string(),
        })
    }

    /// Latency recorded in the envelope, without decoding the response body.
    pub fn latency_ms(&self) -> Result<u64, CassetteError> {
        #[derive(Deserialize)]
        struct Head {
            latency_ms: u64,
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.response_b64)
            .map_err(|e| CassetteError::Payload {
                fingerprint: self.fingerprint.clone(),
                message: e.to_string(),
            })?;
        let head: Head = serde_json::from_slice(&bytes).map_err(|e| CassetteError::Payload {
            fingerprint: self.fingerprint.clone(),
            message: e.to_string(),
        })?;
        Ok(head.latency_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CassetteError {
    #[error(
        "replay determinism error: no {service} entry for fingerprint {actual} ({request}); expected {}",
        expected.as_deref().unwrap_or("no further entries for this service")
    )]
    Mismatch {
        service: ServiceKind,
        expected: Option<String>,
        actual: String,
        request: String,
    },
    #[error("cassette payload for {fingerprint} is corrupt: {message}")]
    Payload { fingerprint: String, message: String },
    #[error("cassette {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("cassette i/o at {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Request identity: SHA-256 over the canonical JSON of `(service, request)`.
pub fn fingerprint<R: Serialize>(service: ServiceKind, request: &R) -> String {
    #[derive(Serialize)]
    struct Keyed<'a, R> {
        service: ServiceKind,
        request: &'a R,
    }
    let bytes = serde_json::to_vec(&Keyed { service, request }).expect("request serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub struct Cassette {
    mode: CassetteMode,
    entries: Vec<CassetteEntry>,
    consumed: Vec<bool>,
    index: HashMap<(ServiceKind, String), VecDeque<usize>>,
}

impl Cassette {
    pub fn new(mode: CassetteMode) -> Self {
        Self::with_entries(mode, Vec::new())
    }

    pub fn with_entries(mode: CassetteMode, entries: Vec<CassetteEntry>) -> Self {
        let mut index: HashMap<(ServiceKind, String), VecDeque<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            index.entry((e.service, e.fingerprint.clone())).or_default().push_back(i);
        }
        let consumed = vec![false; entries.len()];
        Self {
            mode,
            entries,
            consumed,
            index,
        }
    }

    pub fn load(path: &Path, mode: CassetteMode) -> Result<Self, CassetteError> {
        let text = fs::read_to_string(path).map_err(|e| CassetteError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::with_entries(mode, parse_jsonl(path, &text)?))
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn entries(&self) -> &[CassetteEntry] {
        &self.entries
    }

    /// Claim the next recorded entry for `(service, fingerprint)`.
    ///
    /// Lookup is order-independent across fingerprints; repeated identical requests are
    /// served in recording order.
    pub fn take(&mut self, service: ServiceKind, fingerprint: &str, request: &str) -> Result<&CassetteEntry, CassetteError> {
        let slot = self
            .index
            .get_mut(&(service, fingerprint.to_string()))
            .and_then(|q| q.pop_front());
        match slot {
            Some(i) => {
                self.consumed[i] = true;
                Ok(&self.entries[i])
            }
            None => {
                let expected = self
                    .entries
                    .iter()
                    .zip(&self.consumed)
                    .find(|(e, used)| !**used && e.service == service)
                    .map(|(e, _)| format!("{} ({})", e.fingerprint, e.request_digest));
                Err(CassetteError::Mismatch {
                    service,
                    expected,
                    actual: fingerprint.to_string(),
                    request: request.to_string(),
                })
            }
        }
    }

    /// Append a freshly recorded entry. It is not a replay candidate in this session.
    pub fn push(&mut self, entry: CassetteEntry) {
        self.entries.push(entry);
        self.consumed.push(true);
    }

    /// Entries never claimed during replay.
    pub fn unconsumed(&self) -> Vec<&CassetteEntry> {
        self.entries
            .iter()
            .zip(&self.consumed)
            .filter(|(_, used)| !**used)
            .map(|(e, _)| e)
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), CassetteError> {
        crate::fsutil::write_atomic(path, self.to_jsonl().as_bytes()).map_err(|e| CassetteError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub fn to_jsonl(entries: &[CassetteEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("entry serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(path: &Path, text: &str) -> Result<Vec<CassetteEntry>, CassetteError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CassetteError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(service: ServiceKind, fp: &str, body: &str) -> CassetteEntry {
        CassetteEntry {
            service,
            fingerprint: fp.into(),
            request_digest: "req".into(),
            response_b64: CassetteEntry::encode(&Envelope {
                latency_ms: 5,
                attempts: 1,
                outcome: Outcome::Ok(body.to_string()),
            }),
            tokens_in: 1,
            tokens_out: 2,
        }
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("off".parse::<CassetteSpec>().unwrap(), CassetteSpec::Off);
        assert_eq!(
            "replay:golden/a.jsonl".parse::<CassetteSpec>().unwrap(),
            CassetteSpec::Replay("golden/a.jsonl".into())
        );
        assert!("replay:".parse::<CassetteSpec>().is_err());
        assert!("tape:x".parse::<CassetteSpec>().is_err());
    }

    #[test]
    fn take_is_order_independent() {
        let mut c = Cassette::with_entries(
            CassetteMode::Replay,
            vec![entry(ServiceKind::Model, "a", "A"), entry(ServiceKind::Model, "b", "B")],
        );
        let b: Envelope<String> = c.take(ServiceKind::Model, "b", "").unwrap().decode().unwrap();
        assert_eq!(b.outcome, Outcome::Ok("B".into()));
        let a: Envelope<String> = c.take(ServiceKind::Model, "a", "").unwrap().decode().unwrap();
        assert_eq!(a.outcome, Outcome::Ok("A".into()));
        assert!(c.unconsumed().is_empty());
    }

    #[test]
    fn mismatch_names_expected_and_actual() {
        let mut c = Cassette::with_entries(CassetteMode::Replay, vec![entry(ServiceKind::Model, "f1", "x")]);
        let err = c.take(ServiceKind::Model, "f2", "Sufficiency").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("f1") && msg.contains("f2"), "{msg}");
        // exhausted after one use
        c.take(ServiceKind::Model, "f1", "").unwrap();
        assert!(c.take(ServiceKind::Model, "f1", "").is_err());
    }

    #[test]
    fn jsonl_round_trip_is_byte_stable() {
        let entries = vec![entry(ServiceKind::TextSearch, "x", "1"), entry(ServiceKind::ImageGen, "y", "2")];
        let text = to_jsonl(&entries);
        let parsed = parse_jsonl(Path::new("c.jsonl"), &text).unwrap();
        assert_eq!(parsed, entries);
        assert_eq!(to_jsonl(&parsed), text);
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"service\":\"text_search\",\"fingerprint\":\"x\",\"request_digest\""));
    }

    #[test]
    fn fingerprint_depends_on_service_and_request() {
        let a = fingerprint(ServiceKind::TextSearch, &"q");
        assert_eq!(a, fingerprint(ServiceKind::TextSearch, &"q"));
        assert_ne!(a, fingerprint(ServiceKind::ImageSearch, &"q"));
        assert_ne!(a, fingerprint(ServiceKind::TextSearch, &"r"));
    }
}
