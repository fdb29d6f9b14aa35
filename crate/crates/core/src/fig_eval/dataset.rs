//! Evaluation dataset format.
//!
//! ```json
//! {
//!   "version": 1,
//!   "prompts":   [{"id": "p1", "text": "...", "entity_class": "Animal"}],
//!   "features":  [{"prompt_id": "p1", "statement": "...", "concept": "PF"}],
//!   "questions": [{"prompt_id": "p1", "statement": "...", "concept": "PF",
//!                  "needs_reference_image": false, "reference_blob": "refs/p1.png"}]
//! }
//! ```
//!
//! Feature and question ids are optional and default to `<prompt_id>.f<n>` / `<prompt_id>.q<n>`.
//! `reference_blob` paths are relative to the dataset file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::knowledge::{Concept, EntityClass, GroundTruthFeature, UserPrompt};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("dataset {path}: {message}")]
pub struct DatasetError {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPrompt {
    pub id: String,
    pub text: String,
    pub entity_class: EntityClass,
}

impl DatasetPrompt {
    pub fn to_user_prompt(&self, questions: &[EvalQuestion]) -> UserPrompt {
        let mut p = UserPrompt::new(&self.id, &self.text);
        p.entity_class = Some(self.entity_class);
        p.concept_tags = questions
            .iter()
            .filter(|q| q.prompt_id == self.id)
            .map(|q| q.concept)
            .collect();
        p
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFeature {
    #[serde(default)]
    pub id: String,
    pub prompt_id: String,
    pub statement: String,
    pub concept: Concept,
}

impl DatasetFeature {
    pub fn to_feature(&self) -> GroundTruthFeature {
        GroundTruthFeature {
            id: self.id.clone(),
            statement: self.statement.clone(),
            concept: self.concept,
        }
    }
}

fn always_true() -> bool {
    true
}

/// A true/false statement about the generated image whose gold answer is True.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalQuestion {
    #[serde(default)]
    pub id: String,
    pub prompt_id: String,
    pub statement: String,
    pub concept: Concept,
    #[serde(default)]
    pub needs_reference_image: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_blob: Option<PathBuf>,
    #[serde(default = "always_true")]
    pub gold_answer: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub version: u32,
    pub prompts: Vec<DatasetPrompt>,
    #[serde(default)]
    pub features: Vec<DatasetFeature>,
    #[serde(default)]
    pub questions: Vec<EvalQuestion>,
    /// Directory that relative reference paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let err = |message: String| DatasetError {
            path: path.display().to_string(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let mut ds = Self::from_json(&bytes).map_err(|e| err(e.message))?;
        ds.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(ds)
    }

    /// Parse, assign default ids, and validate.
    pub fn from_json(bytes: &[u8]) -> Result<Self, DatasetError> {
        let err = |message: String| DatasetError {
            path: "<inline>".into(),
            message,
        };
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let mut ds: Dataset = serde_path_to_error::deserialize(de)
            .map_err(|e| err(format!("at `{}`: {}", e.path(), e.inner())))?;
        ds.assign_ids();
        ds.validate().map_err(err)?;
        Ok(ds)
    }

    fn assign_ids(&mut self) {
        let mut counters: BTreeMap<String, usize> = BTreeMap::new();
        for f in &mut self.features {
            let n = counters.entry(format!("f:{}", f.prompt_id)).or_default();
            *n += 1;
            if f.id.is_empty() {
                f.id = format!("{}.f{}", f.prompt_id, n);
            }
        }
        for q in &mut self.questions {
            let n = counters.entry(format!("q:{}", q.prompt_id)).or_default();
            *n += 1;
            if q.id.is_empty() {
                q.id = format!("{}.q{}", q.prompt_id, n);
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.version != DATASET_VERSION {
            return Err(format!("unsupported version {} (expected {DATASET_VERSION})", self.version));
        }
        let mut ids = BTreeSet::new();
        for (i, p) in self.prompts.iter().enumerate() {
            if p.id.trim().is_empty() {
                return Err(format!("prompts[{i}].id is blank"));
            }
            if p.text.trim().is_empty() {
                return Err(format!("prompts[{i}].text is blank"));
            }
            if !ids.insert(p.id.as_str()) {
                return Err(format!("duplicate prompt id {:?}", p.id));
            }
        }
        let mut seen = BTreeSet::new();
        for (i, f) in self.features.iter().enumerate() {
            if !ids.contains(f.prompt_id.as_str()) {
                return Err(format!("features[{i}] refers to unknown prompt {:?}", f.prompt_id));
            }
            if f.statement.trim().is_empty() {
                return Err(format!("features[{i}].statement is blank"));
            }
            if !seen.insert(("f", f.id.as_str())) {
                return Err(format!("duplicate feature id {:?}", f.id));
            }
        }
        for (i, q) in self.questions.iter().enumerate() {
            if !ids.contains(q.prompt_id.as_str()) {
                return Err(format!("questions[{i}] refers to unknown prompt {:?}", q.prompt_id));
            }
            if q.statement.trim().is_empty() {
                return Err(format!("questions[{i}].statement is blank"));
            }
            if !q.gold_answer {
                return Err(format!("questions[{i}].gold_answer must be true"));
            }
            if q.needs_reference_image && q.reference_blob.is_none() {
                return Err(format!("questions[{i}] needs a reference image but has no reference_blob"));
            }
            if !seen.insert(("q", q.id.as_str())) {
                return Err(format!("duplicate question id {:?}", q.id));
            }
        }
        Ok(())
    }

    pub fn prompt(&self, id: &str) -> Option<&DatasetPrompt> {
        self.prompts.iter().find(|p| p.id == id)
    }

    pub fn questions_for(&self, prompt_id: &str) -> Vec<&EvalQuestion> {
        self.questions.iter().filter(|q| q.prompt_id == prompt_id).collect()
    }

    pub fn features_for(&self, prompt_id: &str) -> Vec<&DatasetFeature> {
        self.features.iter().filter(|f| f.prompt_id == prompt_id).collect()
    }

    pub fn classes(&self) -> BTreeMap<String, EntityClass> {
        self.prompts.iter().map(|p| (p.id.clone(), p.entity_class)).collect()
    }

    pub fn reference_path(&self, q: &EvalQuestion) -> Option<PathBuf> {
        q.reference_blob.as_ref().map(|p| self.base_dir.join(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "version": 1,
        "prompts": [{"id": "p1", "text": "a frog", "entity_class": "Animal"}],
        "features": [{"prompt_id": "p1", "statement": "green skin", "concept": "PF"}],
        "questions": [
            {"prompt_id": "p1", "statement": "The frog is green.", "concept": "PF"},
            {"prompt_id": "p1", "statement": "It sits on a leaf.", "concept": "CC", "needs_reference_image": true, "reference_blob": "ref.png"}
        ]
    }"#;

    #[test]
    fn parses_and_assigns_ids() {
        let ds = Dataset::from_json(SAMPLE.as_bytes()).unwrap();
        assert_eq!(ds.questions[0].id, "p1.q1");
        assert_eq!(ds.questions[1].id, "p1.q2");
        assert_eq!(ds.features[0].id, "p1.f1");
        assert!(ds.questions[0].gold_answer);
    }

    #[test]
    fn false_gold_rejected() {
        let bad = SAMPLE.replace(r#""concept": "PF"}"#, r#""concept": "PF", "gold_answer": false}"#);
        assert!(Dataset::from_json(bad.as_bytes()).unwrap_err().message.contains("gold_answer"));
    }

    #[test]
    fn unknown_prompt_reference_rejected() {
        let bad = SAMPLE.replace(r#""prompt_id": "p1", "statement": "green skin""#, r#""prompt_id": "p9", "statement": "green skin""#);
        assert!(Dataset::from_json(bad.as_bytes()).unwrap_err().message.contains("p9"));
    }

    #[test]
    fn missing_reference_rejected() {
        let bad = SAMPLE.replace(r#", "reference_blob": "ref.png""#, "");
        assert!(Dataset::from_json(bad.as_bytes()).is_err());
    }

    #[test]
    fn bad_field_named() {
        let bad = SAMPLE.replace(r#""entity_class": "Animal""#, r#""entity_class": "Robot""#);
        assert!(Dataset::from_json(bad.as_bytes()).unwrap_err().message.contains("entity_class"));
    }
}
