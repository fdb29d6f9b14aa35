//! Per-stage and per-round cost accounting built from a run's exchange log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::accounting::{ExchangeRecord, Stage};
use crate::gateways::{ServiceKind, TOKEN_ESTIMATOR};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: String,
    /// Text and image search calls.
    pub retrieval_calls: u64,
    /// Summed latency of search, page-read and download calls.
    pub retrieval_ms: u64,
    pub model_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl StageCost {
    pub fn retrieval_seconds(&self) -> f64 {
        self.retrieval_ms as f64 / 1000.0
    }
}

/// Retrieval per iteration; round 0 is the bootstrap.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCost {
    pub round: u32,
    pub text_retrievals: u64,
    pub image_retrievals: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationCost {
    pub calls: u64,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub retrieval_calls: u64,
    pub text_retrievals: u64,
    pub image_retrievals: u64,
    pub retrieval_ms: u64,
    pub model_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub loop_iterations: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub token_estimator: String,
    pub stages: Vec<StageCost>,
    pub rounds: Vec<RoundCost>,
    pub generation: GenerationCost,
    pub totals: CostTotals,
}

type StageCell = fn(&StageCost) -> String;

impl CostReport {
    /// Aggregate `log`. Untagged exchanges (outside any stage) are ignored.
    pub fn from_log(log: &[ExchangeRecord], loop_iterations: u32) -> Self {
        let mut stages: BTreeMap<Stage, StageCost> = Stage::TABLE
            .iter()
            .map(|&s| {
                (
                    s,
                    StageCost {
                        stage: s.label().to_string(),
                        ..StageCost::default()
                    },
                )
            })
            .collect();
        let mut rounds: BTreeMap<u32, RoundCost> = BTreeMap::new();
        let mut generation = GenerationCost::default();

        for rec in log {
            let Some(stage) = rec.stage else { continue };
            if stage == Stage::Generation {
                generation.calls += 1;
                generation.latency_ms += rec.latency_ms;
                continue;
            }
            let row = stages.get_mut(&stage).expect("table stage");
            let round = rounds.entry(rec.round).or_insert_with(|| RoundCost {
                round: rec.round,
                ..RoundCost::default()
            });
            if rec.service.is_search() {
                row.retrieval_calls += 1;
            }
            match rec.service {
                ServiceKind::TextSearch => round.text_retrievals += 1,
                ServiceKind::ImageSearch => round.image_retrievals += 1,
                _ => {}
            }
            if rec.service.is_retrieval() {
                row.retrieval_ms += rec.latency_ms;
            }
            if rec.service == ServiceKind::Model {
                row.model_calls += 1;
                row.input_tokens += rec.tokens_in;
                row.output_tokens += rec.tokens_out;
                round.input_tokens += rec.tokens_in;
                round.output_tokens += rec.tokens_out;
            }
        }

        let stages: Vec<StageCost> = stages.into_values().collect();
        let rounds: Vec<RoundCost> = rounds.into_values().collect();
        let totals = CostTotals {
            retrieval_calls: stages.iter().map(|s| s.retrieval_calls).sum(),
            text_retrievals: rounds.iter().map(|r| r.text_retrievals).sum(),
            image_retrievals: rounds.iter().map(|r| r.image_retrievals).sum(),
            retrieval_ms: stages.iter().map(|s| s.retrieval_ms).sum(),
            model_calls: stages.iter().map(|s| s.model_calls).sum(),
            input_tokens: stages.iter().map(|s| s.input_tokens).sum(),
            output_tokens: stages.iter().map(|s| s.output_tokens).sum(),
            loop_iterations,
        };
        Self {
            token_estimator: TOKEN_ESTIMATOR.to_string(),
            stages,
            rounds,
            generation,
            totals,
        }
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageCost> {
        self.stages.iter().find(|s| s.stage == stage.label())
    }

    pub fn to_json(&self) -> Vec<u8> {
        crate::fsutil::to_json_bytes(self).expect("cost report serializes")
    }

    /// Plain-text rendering: one column per stage, then per-iteration retrieval.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let mut header = format!("{:<18}", "Metric");
        for s in &self.stages {
            header.push_str(&format!(" | {:>22}", s.stage));
        }
        header.push_str(&format!(" | {:>10}", "Total"));
        out.push_str(&header);
        out.push('\n');
        out.push_str(&"-".repeat(header.len()));
        out.push('\n');

        let t = &self.totals;
        let rows: [(&str, StageCell, String); 5] = [
            ("Retrieval calls", |s| s.retrieval_calls.to_string(), t.retrieval_calls.to_string()),
            (
                "Retrieval time (s)",
                |s| format!("{:.3}", s.retrieval_seconds()),
                format!("{:.3}", t.retrieval_ms as f64 / 1000.0),
            ),
            ("Model calls", |s| s.model_calls.to_string(), t.model_calls.to_string()),
            ("Input tokens", |s| s.input_tokens.to_string(), t.input_tokens.to_string()),
            ("Output tokens", |s| s.output_tokens.to_string(), t.output_tokens.to_string()),
        ];
        for (name, cell, total) in rows.iter() {
            let _ = write!(out, "{name:<18}");
            for s in &self.stages {
                let _ = write!(out, " | {:>22}", cell(s));
            }
            let _ = writeln!(out, " | {total:>10}");
        }

        let _ = writeln!(out, "\n{:<6} | {:>14} | {:>15} | {:>12} | {:>13}", "Iter", "Text retrieval", "Image retrieval", "Input tokens", "Output tokens");
        for r in &self.rounds {
            let label = if r.round == 0 { "boot".to_string() } else { r.round.to_string() };
            let _ = writeln!(
                out,
                "{label:<6} | {:>14} | {:>15} | {:>12} | {:>13}",
                r.text_retrievals, r.image_retrievals, r.input_tokens, r.output_tokens
            );
        }
        let _ = writeln!(
            out,
            "\nIterations: {} | text retrievals: {} | image retrievals: {} | generation calls: {} | token estimator: {}",
            t.loop_iterations, t.text_retrievals, t.image_retrievals, self.generation.calls, self.token_estimator
        );
        out
    }
}
