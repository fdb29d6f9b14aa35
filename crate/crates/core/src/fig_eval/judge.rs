//! Model-judged verdicts: QA questions against a generated image, and ground-truth
//! features against retrieved evidence.

use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use super::dataset::EvalQuestion;
use super::scoring::Judgment;
use crate::gateways::{parse_verdict, GatewayError, InstructionRole, Session};
use crate::knowledge::{ContentHash, GroundTruthFeature, KnowledgeBase};

/// Appended to the question template when a reference image is attached.
pub const REFERENCE_NOTE: &str = " (first attachment) and the ground-truth reference image (second attachment)";

/// A judge model reached through a session, identified in every judgment it emits.
pub struct Judge<'a> {
    pub session: &'a Session,
    pub judge_id: String,
}

impl<'a> Judge<'a> {
    pub fn new(session: &'a Session, judge_id: impl Into<String>) -> Self {
        Self {
            session,
            judge_id: judge_id.into(),
        }
    }

    /// One verdict, plus one re-ask if the first reply is unparseable. A second failure
    /// scores False and is flagged for audit.
    fn verdict(
        &self,
        role: InstructionRole,
        vars: &[(&str, &str)],
        images: &[ContentHash],
    ) -> Result<(bool, Option<String>), GatewayError> {
        let attempted = self.session.invoke_parsed(role, vars, images, parse_verdict)?;
        Ok(match attempted.value {
            Ok(v) => (v, None),
            Err(e) => {
                let raw = attempted.exchanges.last().map(|x| x.raw_response.as_str()).unwrap_or("");
                let audit = format!("unparseable verdict scored False ({e}): {raw:?}");
                tracing::warn!(%role, "{audit}");
                (false, Some(audit))
            }
        })
    }

    pub fn judge_question(
        &self,
        q: &EvalQuestion,
        image: ContentHash,
        reference: Option<ContentHash>,
    ) -> Result<Judgment, GatewayError> {
        match (q.needs_reference_image, reference) {
            (true, None) => {
                return Err(GatewayError::Precondition(format!(
                    "question {} requires a reference image",
                    q.id
                )))
            }
            (false, Some(_)) => {
                return Err(GatewayError::Precondition(format!(
                    "question {} takes no reference image",
                    q.id
                )))
            }
            _ => {}
        }
        let mut images = vec![image];
        images.extend(reference);
        let note = if reference.is_some() { REFERENCE_NOTE } else { "" };
        let (value, audit) = self.verdict(
            InstructionRole::JudgeQuestion,
            &[("question", &q.statement), ("reference_note", note)],
            &images,
        )?;
        Ok(Judgment {
            question_id: q.id.clone(),
            value,
            judge_id: self.judge_id.clone(),
            audit,
        })
    }

    /// Judge each feature against the knowledge base digest and its images.
    pub fn alignment_score(
        &self,
        prompt_id: &str,
        features: &[GroundTruthFeature],
        kb: &KnowledgeBase,
        digest_chars: usize,
    ) -> Result<AlignmentScore, GatewayError> {
        if features.is_empty() {
            return Err(GatewayError::Precondition(format!(
                "prompt {prompt_id} has no ground-truth features"
            )));
        }
        let evidence = kb.context_digest(digest_chars);
        let images: Vec<ContentHash> = kb.images().iter().map(|i| i.content_hash).collect();
        let mut per_feature = Vec::with_capacity(features.len());
        for f in features {
            let (aligned, audit) = self.verdict(
                InstructionRole::JudgeAlignment,
                &[("feature", &f.statement), ("evidence", &evidence)],
                &images,
            )?;
            per_feature.push(FeatureAlignment {
                feature_id: f.id.clone(),
                aligned,
                audit,
            });
        }
        Ok(AlignmentScore {
            prompt_id: prompt_id.to_string(),
            per_feature,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureAlignment {
    pub feature_id: String,
    pub aligned: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<String>,
}

/// Feature-level retrieval accuracy of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub prompt_id: String,
    pub per_feature: Vec<FeatureAlignment>,
}

impl AlignmentScore {
    pub fn n(&self) -> u64 {
        self.per_feature.len() as u64
    }

    pub fn aligned(&self) -> u64 {
        self.per_feature.iter().filter(|f| f.aligned).count() as u64
    }

    pub fn a(&self) -> BigRational {
        BigRational::new(self.aligned().into(), self.n().into())
    }
}
