//! Stage operations of the retrieval loop and the driver that sequences them.

use std::collections::HashSet;

use crate::accounting::Stage;
use crate::gateways::{
    check_indices, parse_structured, ContentRefineReply, Decision, DecisionReply, ExtendedPromptReply,
    GatewayError, GenerationArtifact, InstructionRole, KeptIndices, Modality, ParseError, PlannedQuery,
    QueryPlanReply, Session, VisualRefineReply,
};
use crate::knowledge::{ContentHash, ImageEvidence, InvalidPrompt, TextEvidence, UserPrompt};

use super::config::{ConfigError, IterationPolicy, RunConfig};
use super::types::*;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] InvalidPrompt),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{op} requires status {expected:?}, found {found:?}")]
    Status {
        op: &'static str,
        expected: RunStatus,
        found: RunStatus,
    },
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Persist(#[from] crate::knowledge::PersistError),
    #[error("run directory i/o at {path}: {message}")]
    Io { path: String, message: String },
}

impl PipelineError {
    pub fn is_determinism(&self) -> bool {
        matches!(self, PipelineError::Gateway(e) if e.is_determinism())
    }
}

/// Drop blank queries, then keep at most [`MAX_QUERIES_PER_ROUND`] in listed order.
/// Returns the kept queries and the number of non-blank queries proposed.
pub fn bound_queries(queries: Vec<PlannedQuery>) -> (Vec<PlannedQuery>, usize) {
    let mut kept: Vec<PlannedQuery> = queries
        .into_iter()
        .filter(|q| !q.query.trim().is_empty())
        .map(|q| PlannedQuery {
            modality: q.modality,
            query: q.query.trim().to_string(),
        })
        .collect();
    let proposed = kept.len();
    kept.truncate(MAX_QUERIES_PER_ROUND);
    (kept, proposed)
}

fn numbered(items: impl IntoIterator<Item = String>) -> String {
    let mut out = String::new();
    for (i, item) in items.into_iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, item));
    }
    if out.is_empty() {
        out.push_str("(none)\n");
    }
    out
}

fn clip(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

fn render_images(images: &[ImageEvidence]) -> String {
    numbered(
        images
            .iter()
            .map(|i| format!("{} | source: {} | {}x{}", i.title, i.source_url, i.width, i.height)),
    )
}

/// Sorted, de-duplicated 1-based indices mapped to 0-based positions.
fn selection(indices: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = indices.iter().map(|i| i - 1).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Stage operations bound to one session and configuration.
pub struct Pipeline<'a> {
    session: &'a Session,
    config: &'a RunConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(session: &'a Session, config: &'a RunConfig) -> Self {
        Self { session, config }
    }

    pub fn session(&self) -> &Session {
        self.session
    }

    fn expect_status(state: &RunState, op: &'static str, expected: RunStatus) -> Result<(), PipelineError> {
        if state.status != expected {
            return Err(PipelineError::Status {
                op,
                expected,
                found: state.status,
            });
        }
        Ok(())
    }

    /// Copy the session's exchange log and new warnings into `state`.
    pub fn sync(&self, state: &mut RunState) {
        state.exchanges = self.session.exchange_log();
        state.warnings.extend(self.session.take_warnings());
    }

    fn digest(&self, state: &RunState) -> String {
        state.kb.context_digest(self.config.digest_max_chars)
    }

    /// One text search on the raw prompt; the top pages are merged unfiltered at round 0.
    pub fn bootstrap(&self, prompt: &UserPrompt) -> Result<RunState, PipelineError> {
        prompt.validate()?;
        let mut state = RunState::new(prompt.clone());
        self.session.set_stage(Some(Stage::Bootstrap), 0);
        let hits = match self.session.search_text(&prompt.text) {
            Ok(h) => h,
            Err(e @ GatewayError::Backend { .. }) => {
                self.session.warn(format!("bootstrap search failed: {e}"));
                Vec::new()
            }
            Err(e) => return Err(e.into()),
        };
        if hits.is_empty() {
            self.session.warn("bootstrap search returned no results; starting with an empty knowledge base");
        }
        let texts = self
            .session
            .rank_and_fetch_pages(prompt, &prompt.text, &hits, self.config.keep_pages)?;
        let hashes: Vec<ContentHash> = texts.iter().map(|t| t.content_hash).collect();
        state.kb = state.kb.merge(&texts, &[], 0);
        state.rounds.push(RoundRecord {
            round: 0,
            plan: None,
            raw_texts: hashes.clone(),
            raw_images: Vec::new(),
            kept_texts: hashes,
            kept_images: Vec::new(),
        });
        state.status = RunStatus::Looping;
        self.sync(&mut state);
        Ok(state)
    }

    /// Ask the model for sub-questions and queries for the next loop round.
    pub fn plan_round(&self, state: &mut RunState) -> Result<QueryPlan, PipelineError> {
        Self::expect_status(state, "plan_round", RunStatus::Looping)?;
        if state.round >= self.config.max_rounds {
            return Err(PipelineError::Precondition(format!(
                "round cap {} already reached",
                self.config.max_rounds
            )));
        }
        let round = state.round + 1;
        self.session.set_stage(Some(Stage::QueryPlanning), round);
        let digest = self.digest(state);
        let max = MAX_QUERIES_PER_ROUND.to_string();
        let reply = self.session.invoke_structured::<QueryPlanReply>(
            InstructionRole::QueryPlanning,
            &[("prompt", &state.prompt.text), ("knowledge", &digest), ("max_queries", &max)],
            &[],
            |_| Ok(()),
        )?;
        let QueryPlanReply { sub_questions, queries } = reply.value;
        let (queries, proposed) = bound_queries(queries);
        if proposed > queries.len() {
            self.session.warn(format!(
                "round {round}: model proposed {proposed} queries; dispatching the first {}",
                queries.len()
            ));
        }
        if queries.is_empty() {
            self.session
                .warn(format!("round {round}: no queries planned; skipping retrieval for this round"));
        }
        let sub_questions: Vec<String> = sub_questions
            .into_iter()
            .map(|q| q.trim().to_string())
            .filter(|q| !q.is_empty())
            .collect();
        for q in &sub_questions {
            if !state.pending_questions.contains(q) {
                state.pending_questions.push(q.clone());
            }
        }
        let plan = QueryPlan {
            round,
            sub_questions,
            queries,
            proposed,
        };
        state.round = round;
        state.rounds.push(RoundRecord {
            round,
            plan: Some(plan.clone()),
            raw_texts: Vec::new(),
            raw_images: Vec::new(),
            kept_texts: Vec::new(),
            kept_images: Vec::new(),
        });
        self.sync(state);
        Ok(plan)
    }

    /// Run every planned query. A query whose search fails is skipped with a warning.
    pub fn retrieve_round(
        &self,
        state: &RunState,
        plan: &QueryPlan,
    ) -> Result<(Vec<TextEvidence>, Vec<ImageEvidence>), PipelineError> {
        if plan.is_empty() {
            return Err(PipelineError::Precondition("retrieve_round needs at least one query".into()));
        }
        self.session.set_stage(Some(Stage::QueryPlanning), plan.round);
        let mut texts = Vec::new();
        let mut images = Vec::new();
        for q in &plan.queries {
            let searched = match q.modality {
                Modality::Text => self.session.search_text(&q.query),
                Modality::Image => self.session.search_images(&q.query),
            };
            let hits = match searched {
                Ok(h) => h,
                Err(e @ GatewayError::Backend { .. }) => {
                    self.session.warn(format!("skipping {:?} query {:?}: {e}", q.modality, q.query));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            match q.modality {
                Modality::Text => texts.extend(self.session.rank_and_fetch_pages(
                    &state.prompt,
                    &q.query,
                    &hits,
                    self.config.keep_pages,
                )?),
                Modality::Image => images.extend(self.session.select_images(&q.query, &hits, self.config.keep_images)?),
            }
        }
        Ok((texts, images))
    }

    /// Filter raw evidence (text first, then images against the updated knowledge) and
    /// merge what is kept at the current round.
    pub fn accumulate(
        &self,
        state: &mut RunState,
        raw_texts: &[TextEvidence],
        raw_images: &[ImageEvidence],
    ) -> Result<(), PipelineError> {
        Self::expect_status(state, "accumulate", RunStatus::Looping)?;
        let round = state.round;
        self.session.set_stage(Some(Stage::KnowledgeAccumulation), round);

        let mut seen = HashSet::new();
        let texts: Vec<&TextEvidence> = raw_texts
            .iter()
            .filter(|t| !state.kb.contains(&t.content_hash) && seen.insert(t.content_hash))
            .collect();
        let images: Vec<&ImageEvidence> = raw_images
            .iter()
            .filter(|i| !state.kb.contains(&i.content_hash) && seen.insert(i.content_hash))
            .collect();

        let mut kept_texts: Vec<TextEvidence> = Vec::new();
        if !texts.is_empty() {
            let candidates = numbered(texts.iter().map(|t| {
                format!(
                    "source: {}\n{}",
                    t.source_url,
                    clip(&t.content, self.config.candidate_chars)
                )
            }));
            let digest = self.digest(state);
            let keep = self.session.invoke_structured::<KeptIndices>(
                InstructionRole::TextFilter,
                &[("prompt", &state.prompt.text), ("knowledge", &digest), ("candidates", &candidates)],
                &[],
                |r| check_indices("keep", &r.keep, texts.len()),
            )?;
            kept_texts = selection(&keep.value.keep).into_iter().map(|i| texts[i].clone()).collect();
            state.kb = state.kb.merge(&kept_texts, &[], round);
        }

        let mut kept_images: Vec<ImageEvidence> = Vec::new();
        if !images.is_empty() {
            let owned: Vec<ImageEvidence> = images.iter().map(|i| (*i).clone()).collect();
            let candidates = render_images(&owned);
            let attach: Vec<ContentHash> = owned.iter().map(|i| i.content_hash).collect();
            let digest = self.digest(state);
            let keep = self.session.invoke_structured::<KeptIndices>(
                InstructionRole::ImageFilter,
                &[("prompt", &state.prompt.text), ("knowledge", &digest), ("candidates", &candidates)],
                &attach,
                |r| check_indices("keep", &r.keep, owned.len()),
            )?;
            kept_images = selection(&keep.value.keep).into_iter().map(|i| owned[i].clone()).collect();
            state.kb = state.kb.merge(&[], &kept_images, round);
        }

        if let Some(rec) = state.rounds.iter_mut().rev().find(|r| r.round == round) {
            rec.raw_texts.extend(raw_texts.iter().map(|t| t.content_hash));
            rec.raw_images.extend(raw_images.iter().map(|i| i.content_hash));
            rec.kept_texts.extend(kept_texts.iter().map(|t| t.content_hash));
            rec.kept_images.extend(kept_images.iter().map(|i| i.content_hash));
        }
        self.sync(state);
        Ok(())
    }

    /// Sufficiency gate. Fixed policies never call the model; the adaptive policy does,
    /// except at the round cap where Refine is forced.
    pub fn decide(&self, state: &mut RunState) -> Result<SufficiencyDecision, PipelineError> {
        Self::expect_status(state, "decide", RunStatus::Looping)?;
        let round = state.round;
        self.session.set_stage(Some(Stage::KnowledgeAccumulation), round);
        let make = |value, rationale: String, source| SufficiencyDecision {
            round,
            value,
            rationale,
            source,
        };
        let decision = match self.config.policy {
            IterationPolicy::FixedRounds(n) => {
                let value = if round < n { Decision::Retrieval } else { Decision::Refine };
                make(value, format!("fixed policy: round {round} of {n}"), DecisionSource::Policy)
            }
            IterationPolicy::Adaptive if round >= self.config.max_rounds => {
                self.session.warn(format!(
                    "round cap {} reached; proceeding to refinement",
                    self.config.max_rounds
                ));
                make(Decision::Refine, "round cap reached".into(), DecisionSource::Cap)
            }
            IterationPolicy::Adaptive => {
                let digest = self.digest(state);
                let questions = numbered(state.pending_questions.iter().cloned());
                let attempted = self.session.invoke_parsed(
                    InstructionRole::Sufficiency,
                    &[("prompt", &state.prompt.text), ("knowledge", &digest), ("questions", &questions)],
                    &[],
                    parse_structured::<DecisionReply>,
                )?;
                match attempted.value {
                    Ok(reply) => make(reply.decision, reply.rationale, DecisionSource::Model),
                    Err(e) => {
                        self.session
                            .warn(format!("round {round}: sufficiency reply unusable ({e}); defaulting to Refine"));
                        make(Decision::Refine, "unparseable decision".into(), DecisionSource::Fallback)
                    }
                }
            }
        };
        state.decisions.push(decision.clone());
        if decision.value == Decision::Refine {
            state.status = RunStatus::Refining;
        }
        self.sync(state);
        Ok(decision)
    }

    /// One full loop round: plan, retrieve, accumulate, decide.
    pub fn run_round(&self, state: &mut RunState) -> Result<SufficiencyDecision, PipelineError> {
        let plan = self.plan_round(state)?;
        if !plan.is_empty() {
            let (texts, images) = self.retrieve_round(state, &plan)?;
            self.accumulate(state, &texts, &images)?;
        }
        self.decide(state)
    }

    /// Content refinement, visual refinement, then prompt extension.
    pub fn refine_and_extend(&self, state: &mut RunState) -> Result<EnrichedPrompt, PipelineError> {
        Self::expect_status(state, "refine_and_extend", RunStatus::Refining)?;
        let round = state.round;
        let prompt = state.prompt.text.clone();
        self.session.set_stage(Some(Stage::FineGrainedRefine), round);

        let kb_images = state.kb.images().to_vec();
        let digest = self.digest(state);
        let listing = render_images(&kb_images);
        let attach: Vec<ContentHash> = kb_images.iter().map(|i| i.content_hash).collect();
        let cr = self.session.invoke_structured::<ContentRefineReply>(
            InstructionRole::ContentRefine,
            &[("prompt", &prompt), ("knowledge", &digest), ("images", &listing)],
            &attach,
            |r| check_indices("keep_images", &r.keep_images, kb_images.len()),
        )?;
        let textual_features: Vec<String> = cr.value.textual_features.iter().map(|f| f.trim().to_string()).collect();
        let mut seen = HashSet::new();
        let refined: Vec<ImageEvidence> = cr
            .value
            .keep_images
            .iter()
            .filter(|&&i| seen.insert(i))
            .map(|&i| kb_images[i - 1].clone())
            .collect();
        let refined_keys: Vec<ContentHash> = refined.iter().map(|i| i.content_hash).collect();
        let refined_listing = render_images(&refined);
        let features_text = numbered(textual_features.iter().cloned());

        let visual_features: Vec<VisualFeature> = if refined.is_empty() {
            Vec::new()
        } else {
            let n = refined.len();
            let vr = self.session.invoke_structured::<VisualRefineReply>(
                InstructionRole::VisualRefine,
                &[("prompt", &prompt), ("images", &refined_listing), ("textual_features", &features_text)],
                &refined_keys,
                |r| {
                    for (i, f) in r.visual_features.iter().enumerate() {
                        if f.image == 0 || f.image > n {
                            return Err(ParseError::field(
                                format!("visual_features[{i}].image"),
                                format!("index {} out of range 1..={n}", f.image),
                            ));
                        }
                    }
                    Ok(())
                },
            )?;
            vr.value
                .visual_features
                .iter()
                .map(|f| VisualFeature {
                    image: refined[f.image - 1].content_hash,
                    description: f.feature.trim().to_string(),
                })
                .collect()
        };

        self.session.set_stage(Some(Stage::PromptExtension), round);
        let visual_text = numbered(visual_features.iter().map(|f| {
            let pos = refined.iter().position(|r| r.content_hash == f.image).unwrap_or(0) + 1;
            format!("(image {pos}) {}", f.description)
        }));
        let pe = self.session.invoke_structured::<ExtendedPromptReply>(
            InstructionRole::PromptExtend,
            &[
                ("prompt", &prompt),
                ("visual_features", &visual_text),
                ("images", &refined_listing),
                ("textual_features", &features_text),
            ],
            &refined_keys,
            |_| Ok(()),
        )?;
        let enriched = EnrichedPrompt {
            source_prompt_id: state.prompt.id.clone(),
            prompt_text: pe.value.prompt,
            textual_features,
            visual_features,
            refined_images: refined,
        };
        state.enriched = Some(enriched.clone());
        state.status = RunStatus::Generating;
        self.sync(state);
        Ok(enriched)
    }

    /// Hand the enriched prompt to the generator unless generation is skipped.
    pub fn generate(&self, state: &mut RunState) -> Result<Option<GenerationArtifact>, PipelineError> {
        Self::expect_status(state, "generate", RunStatus::Generating)?;
        if self.config.skip_generation {
            state.status = RunStatus::Done;
            return Ok(None);
        }
        let enriched = state
            .enriched
            .clone()
            .ok_or_else(|| PipelineError::Precondition("no enriched prompt to generate from".into()))?;
        self.session.set_stage(Some(Stage::Generation), state.round);
        let artifact = self.session.generate_image(&enriched);
        self.sync(state);
        let artifact = artifact?;
        state.status = RunStatus::Done;
        Ok(Some(artifact))
    }

    /// Advance `state` by one stage. Returns a generation artifact when one is produced.
    pub fn step(&self, state: &mut RunState) -> Result<Option<GenerationArtifact>, PipelineError> {
        match state.status {
            RunStatus::Bootstrapping => {
                *state = self.bootstrap(&state.prompt)?;
            }
            RunStatus::Looping => {
                self.run_round(state)?;
            }
            RunStatus::Refining => {
                self.refine_and_extend(state)?;
            }
            RunStatus::Generating => return self.generate(state),
            RunStatus::Done | RunStatus::Failed => {}
        }
        Ok(None)
    }
}
