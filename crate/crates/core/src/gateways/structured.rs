//! Extraction and validation of structured model replies.
//!
//! Replies may wrap the JSON block in prose or code fences; the first well-formed JSON
//! object or array in the text is taken as the reply and checked against the schema.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Registered reply schemas, one per model role output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemaId {
    Ranking,
    QueryPlan,
    KeptIndices,
    Decision,
    ContentRefine,
    VisualRefine,
    ExtendedPrompt,
    Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no structured block found in reply: {raw:?}")]
    NoBlock { raw: String },
    #[error("reply failed validation at `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl ParseError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        ParseError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// A typed reply shape with its own semantic checks.
pub trait StructuredReply: DeserializeOwned {
    const SCHEMA: SchemaId;

    fn validate(&self) -> Result<(), ParseError> {
        Ok(())
    }
}

/// First well-formed JSON object or array embedded in `raw`.
pub fn extract_block(raw: &str) -> Option<Value> {
    for (i, c) in raw.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            if v.is_object() || v.is_array() {
                return Some(v);
            }
        }
    }
    None
}

pub fn parse_structured<T: StructuredReply>(raw: &str) -> Result<T, ParseError> {
    let block = extract_block(raw).ok_or_else(|| ParseError::NoBlock { raw: raw.to_string() })?;
    let value: T = serde_path_to_error::deserialize(block).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<root>".to_string() } else { path };
        ParseError::Validation {
            field,
            message: e.into_inner().to_string(),
        }
    })?;
    value.validate()?;
    Ok(value)
}

/// Ordered list of 1-based result numbers, most relevant first.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct Ranking {
    pub ranking: Vec<usize>,
}

impl StructuredReply for Ranking {
    const SCHEMA: SchemaId = SchemaId::Ranking;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct PlannedQuery {
    pub modality: Modality,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct QueryPlanReply {
    #[serde(default)]
    pub sub_questions: Vec<String>,
    pub queries: Vec<PlannedQuery>,
}

impl StructuredReply for QueryPlanReply {
    const SCHEMA: SchemaId = SchemaId::QueryPlan;
}

/// 1-based indices of candidates to keep.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct KeptIndices {
    pub keep: Vec<usize>,
}

impl StructuredReply for KeptIndices {
    const SCHEMA: SchemaId = SchemaId::KeptIndices;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize, Serialize)]
pub enum Decision {
    Retrieval,
    Refine,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct DecisionReply {
    pub decision: Decision,
    #[serde(default)]
    pub rationale: String,
}

impl StructuredReply for DecisionReply {
    const SCHEMA: SchemaId = SchemaId::Decision;
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct ContentRefineReply {
    pub textual_features: Vec<String>,
    #[serde(default)]
    pub keep_images: Vec<usize>,
}

impl StructuredReply for ContentRefineReply {
    const SCHEMA: SchemaId = SchemaId::ContentRefine;

    fn validate(&self) -> Result<(), ParseError> {
        for (i, f) in self.textual_features.iter().enumerate() {
            if f.trim().is_empty() {
                return Err(ParseError::field(format!("textual_features[{i}]"), "blank feature"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct VisualFeatureReply {
    pub image: usize,
    pub feature: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct VisualRefineReply {
    pub visual_features: Vec<VisualFeatureReply>,
}

impl StructuredReply for VisualRefineReply {
    const SCHEMA: SchemaId = SchemaId::VisualRefine;

    fn validate(&self) -> Result<(), ParseError> {
        for (i, f) in self.visual_features.iter().enumerate() {
            if f.feature.trim().is_empty() {
                return Err(ParseError::field(format!("visual_features[{i}].feature"), "blank feature"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct ExtendedPromptReply {
    pub prompt: String,
}

impl StructuredReply for ExtendedPromptReply {
    const SCHEMA: SchemaId = SchemaId::ExtendedPrompt;

    fn validate(&self) -> Result<(), ParseError> {
        if self.prompt.trim().is_empty() {
            return Err(ParseError::field("prompt", "extended prompt is blank"));
        }
        Ok(())
    }
}

/// Binary judge verdict. Accepts `{"verdict": "True"}`, `{"verdict": true}`, or prose in
/// which exactly one of the words true/false occurs (any case).
pub fn parse_verdict(raw: &str) -> Result<bool, ParseError> {
    if let Some(Value::Object(map)) = extract_block(raw) {
        if let Some(v) = map.get("verdict").or_else(|| map.get("answer")) {
            return match v {
                Value::Bool(b) => Ok(*b),
                Value::String(s) => verdict_word(s).ok_or_else(|| {
                    ParseError::field("verdict", format!("expected True or False, got {s:?}"))
                }),
                other => Err(ParseError::field("verdict", format!("expected True or False, got {other}"))),
            };
        }
    }
    verdict_word(raw).ok_or_else(|| ParseError::NoBlock { raw: raw.to_string() })
}

fn verdict_word(text: &str) -> Option<bool> {
    let re = regex::Regex::new(r"(?i)\b(true|false)\b").expect("static regex");
    let mut seen_true = false;
    let mut seen_false = false;
    for m in re.find_iter(text) {
        if m.as_str().eq_ignore_ascii_case("true") {
            seen_true = true;
        } else {
            seen_false = true;
        }
    }
    match (seen_true, seen_false) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}
