//! Evaluation over a directory of finished runs.

use std::fmt::Write as _;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetError};
use super::judge::{AlignmentScore, Judge};
use super::scoring::{
    macro_average, score_prompt, Averaging, Exact, Grouping, Judgment, PromptScore, ReportTable, ScoreError,
};
use crate::fsutil;
use crate::gateways::{estimate_tokens, GatewayError, GenerationArtifact};
use crate::knowledge::EntityClass;
use crate::pipeline::{CostReport, CostTotals, RunDir, RunStatus, ARTIFACT_DIR};

pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("dataset has no prompts")]
    NoPrompts,
    #[error("judge: {0}")]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl EvalError {
    pub fn is_determinism(&self) -> bool {
        matches!(self, EvalError::Gateway(e) if e.is_determinism())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub averaging: Averaging,
    /// Character budget of the evidence digest shown to the alignment judge.
    pub digest_chars: usize,
    pub judge_id: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            averaging: Averaging::Macro,
            digest_chars: 12_000,
            judge_id: "judge".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub covered: usize,
    pub total: usize,
}

impl Coverage {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.covered as f64 / self.total as f64
        }
    }
}

impl std::fmt::Display for Coverage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.covered, self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPrompt {
    pub prompt_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEval {
    pub prompt_id: String,
    pub entity_class: EntityClass,
    pub score: PromptScore,
    pub judgments: Vec<Judgment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentScore>,
    pub iters: u32,
    /// Token estimate of the enriched prompt text.
    pub prompt_tokens: u64,
    pub reference_images: usize,
    pub cost: CostTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub mean: Exact,
    pub percent: f64,
    pub support: u64,
}

/// Per-method summary: mean iterations, alignment, prompt tokens, references, accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub iters: f64,
    pub r_acc: Option<f64>,
    pub tokens: f64,
    pub images: f64,
    pub g_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub judge_id: String,
    pub averaging: Averaging,
    pub coverage: Coverage,
    pub skipped: Vec<SkippedPrompt>,
    pub prompts: Vec<PromptEval>,
    pub classes: Option<ReportTable>,
    pub concepts: Option<ReportTable>,
    pub alignment: Option<AlignmentSummary>,
    pub summary: Summary,
    pub cost: CostTotals,
    pub audits: Vec<String>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn add_totals(acc: &mut CostTotals, t: &CostTotals) {
    acc.retrieval_calls += t.retrieval_calls;
    acc.text_retrievals += t.text_retrievals;
    acc.image_retrievals += t.image_retrievals;
    acc.retrieval_ms += t.retrieval_ms;
    acc.model_calls += t.model_calls;
    acc.input_tokens += t.input_tokens;
    acc.output_tokens += t.output_tokens;
    acc.loop_iterations += t.loop_iterations;
}

fn mean_f64(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

enum Loaded {
    Evaluated(Box<PromptEval>),
    Skipped(String),
}

fn evaluate_prompt(
    dataset: &Dataset,
    prompt_id: &str,
    runs_dir: &Path,
    judge: &Judge<'_>,
    options: &EvalOptions,
) -> Result<Loaded, EvalError> {
    let root = runs_dir.join(prompt_id);
    if !root.is_dir() {
        return Ok(Loaded::Skipped("no run directory".into()));
    }
    let dir = RunDir::new(&root);
    let blobs = judge.session.blobs();
    let state = match dir.load_state(blobs) {
        Ok(s) => s,
        Err(e) => return Ok(Loaded::Skipped(format!("unreadable run: {e}"))),
    };
    if state.status != RunStatus::Done {
        return Ok(Loaded::Skipped(format!("run status {:?}", state.status)));
    }
    let Some(enriched) = &state.enriched else {
        return Ok(Loaded::Skipped("no enriched prompt".into()));
    };
    let image = match GenerationArtifact::load(&dir.path(ARTIFACT_DIR)) {
        Ok(GenerationArtifact { bytes: Some(b), .. }) => blobs.put(&b),
        _ => return Ok(Loaded::Skipped("no generated image".into())),
    };
    let questions = dataset.questions_for(prompt_id);
    if questions.is_empty() {
        return Ok(Loaded::Skipped("no questions".into()));
    }

    let mut judgments = Vec::with_capacity(questions.len());
    for q in &questions {
        let reference = match (q.needs_reference_image, dataset.reference_path(q)) {
            (true, Some(path)) => Some(blobs.put(&std::fs::read(&path).map_err(|e| io_err(&path, e))?)),
            _ => None,
        };
        judgments.push(judge.judge_question(q, image, reference)?);
    }
    let score = score_prompt(prompt_id, &judgments, &questions)?;

    let features: Vec<_> = dataset.features_for(prompt_id).iter().map(|f| f.to_feature()).collect();
    let alignment = if features.is_empty() {
        None
    } else {
        Some(judge.alignment_score(prompt_id, &features, &state.kb, options.digest_chars)?)
    };

    let cost = CostReport::from_log(&state.exchanges, state.loop_iterations());
    Ok(Loaded::Evaluated(Box::new(PromptEval {
        prompt_id: prompt_id.to_string(),
        entity_class: dataset.prompt(prompt_id).expect("prompt exists").entity_class,
        score,
        judgments,
        alignment,
        iters: state.loop_iterations(),
        prompt_tokens: estimate_tokens(&enriched.prompt_text),
        reference_images: enriched.refined_images.len(),
        cost: cost.totals,
    })))
}

/// Judge every dataset prompt whose run directory `runs_dir/<prompt_id>` holds a finished
/// run with a generated image. Other prompts are listed as skipped.
pub fn evaluate_run(
    dataset: &Dataset,
    runs_dir: &Path,
    judge: &Judge<'_>,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if dataset.prompts.is_empty() {
        return Err(EvalError::NoPrompts);
    }
    let mut prompts = Vec::new();
    let mut skipped = Vec::new();
    for p in &dataset.prompts {
        match evaluate_prompt(dataset, &p.id, runs_dir, judge, options)? {
            Loaded::Evaluated(e) => prompts.push(*e),
            Loaded::Skipped(reason) => {
                tracing::warn!(prompt = %p.id, %reason, "prompt skipped");
                skipped.push(SkippedPrompt {
                    prompt_id: p.id.clone(),
                    reason,
                })
            }
        }
    }

    let scores: Vec<PromptScore> = prompts.iter().map(|p| p.score.clone()).collect();
    let classes = dataset.classes();
    let (class_table, concept_table) = if scores.is_empty() {
        (None, None)
    } else {
        (
            Some(macro_average(&scores, &classes, Grouping::EntityClass, options.averaging)?),
            Some(macro_average(&scores, &classes, Grouping::Concept, options.averaging)?),
        )
    };

    let aligned: Vec<BigRational> = prompts.iter().filter_map(|p| p.alignment.as_ref().map(|a| a.a())).collect();
    let alignment = (!aligned.is_empty()).then(|| {
        let sum = aligned.iter().fold(BigRational::zero(), |acc, v| acc + v);
        let mean = Exact(sum / BigRational::from_integer(BigInt::from(aligned.len())));
        AlignmentSummary {
            percent: mean.percent(),
            mean,
            support: aligned.len() as u64,
        }
    });

    let summary = Summary {
        iters: mean_f64(prompts.iter().map(|p| p.iters as f64)),
        r_acc: alignment.as_ref().map(|a| a.percent),
        tokens: mean_f64(prompts.iter().map(|p| p.prompt_tokens as f64)),
        images: mean_f64(prompts.iter().map(|p| p.reference_images as f64)),
        g_acc: class_table.as_ref().and_then(|t| t.all.as_ref()).map(|r| r.percent),
    };

    let mut cost = CostTotals::default();
    let mut audits = Vec::new();
    for p in &prompts {
        add_totals(&mut cost, &p.cost);
        for j in &p.judgments {
            if let Some(a) = &j.audit {
                audits.push(format!("{}/{}: {a}", p.prompt_id, j.question_id));
            }
        }
        for f in p.alignment.iter().flat_map(|a| &a.per_feature) {
            if let Some(a) = &f.audit {
                audits.push(format!("{}/{}: {a}", p.prompt_id, f.feature_id));
            }
        }
    }

    Ok(EvalReport {
        version: REPORT_VERSION,
        judge_id: judge.judge_id.clone(),
        averaging: options.averaging,
        coverage: Coverage {
            covered: prompts.len(),
            total: dataset.prompts.len(),
        },
        skipped,
        prompts,
        classes: class_table,
        concepts: concept_table,
        alignment,
        summary,
        cost,
        audits,
    })
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    pub fn to_json(&self) -> Vec<u8> {
        fsutil::to_json_bytes(self).expect("report serializes")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Evaluation report (judge: {})", self.judge_id);
        let _ = writeln!(out, "Coverage: {} prompts ({:.1}%)", self.coverage, self.coverage.ratio() * 100.0);
        for s in &self.skipped {
            let _ = writeln!(out, "  skipped {}: {}", s.prompt_id, s.reason);
        }
        let avg = match self.averaging {
            Averaging::Macro => "macro",
            Averaging::Micro => "micro",
        };
        out.push('\n');
        if let Some(t) = &self.classes {
            let _ = writeln!(out, "Accuracy by entity class ({avg})");
            out.push_str(&t.render("Class"));
            out.push('\n');
        }
        if let Some(t) = &self.concepts {
            let _ = writeln!(out, "Accuracy by concept ({avg})");
            out.push_str(&t.render("Concept"));
            out.push('\n');
        }
        if let Some(a) = &self.alignment {
            let _ = writeln!(out, "Retrieval alignment: {:.1}% ({}) over {} prompt(s)\n", a.percent, a.mean, a.support);
        }
        let s = &self.summary;
        let _ = writeln!(out, "{:>6} {:>6} {:>7} {:>6} {:>6}", "Iters", "R.Acc", "Tokens", "Images", "G.Acc");
        let _ = writeln!(
            out,
            "{:>6.2} {:>6} {:>7.1} {:>6.2} {:>6}",
            s.iters,
            opt_pct(s.r_acc),
            s.tokens,
            s.images,
            opt_pct(s.g_acc)
        );
        let c = &self.cost;
        let _ = writeln!(
            out,
            "\nCost: {} searches ({} text, {} image), {:.2} s retrieval, {} model calls, {} input / {} output tokens",
            c.retrieval_calls,
            c.text_retrievals,
            c.image_retrievals,
            c.retrieval_ms as f64 / 1000.0,
            c.model_calls,
            c.input_tokens,
            c.output_tokens
        );
        if !self.audits.is_empty() {
            let _ = writeln!(out, "\nAudit ({}):", self.audits.len());
            for a in &self.audits {
                let _ = writeln!(out, "  {a}");
            }
        }
        out
    }

    /// Write `report.json` and the rendered `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let json = dir.join(REPORT_FILE);
        fsutil::write_atomic(&json, &self.to_json()).map_err(|e| io_err(&json, e))?;
        let txt = dir.join(REPORT_TABLE_FILE);
        fsutil::write_atomic(&txt, self.render().as_bytes()).map_err(|e| io_err(&txt, e))
    }
}
