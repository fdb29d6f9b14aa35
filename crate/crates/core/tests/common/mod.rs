//! Golden fixtures shared by the integration suites.
//!
//! `ORIG_REGEN_GOLDEN=1 cargo test -p orig-core --test golden` rewrites everything under
//! `tests/golden/` from the scripted scenarios below.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use orig_core::fig_eval::{evaluate_run, Dataset, EvalOptions, EvalReport, Judge};
use orig_core::gateways::{Cassette, CassetteMode, InstructionRole, ModelReply, Services, Session, VirtualClock};
use orig_core::knowledge::{BlobStore, UserPrompt};
use orig_core::pipeline::{run, RunBundle, RunConfig};
use orig_core::scripted::{line_value, png_bytes, Scenario, ScriptedDownloader, ScriptedModel, ScriptedReader, ScriptedSearch};

pub const CASES: [&str; 3] = ["caseA", "caseB", "caseC"];

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn runs_dir() -> PathBuf {
    golden_dir().join("runs")
}

pub fn eval_dir() -> PathBuf {
    golden_dir().join("eval")
}

pub fn plan(text: &[&str], image: &[&str]) -> String {
    let mut qs: Vec<serde_json::Value> = text
        .iter()
        .map(|q| serde_json::json!({"modality": "text", "query": q}))
        .collect();
    qs.extend(image.iter().map(|q| serde_json::json!({"modality": "image", "query": q})));
    serde_json::json!({"sub_questions": ["what does it look like?"], "queries": qs}).to_string()
}

pub fn prompt(case: &str) -> UserPrompt {
    let text = match case {
        "caseA" => "frog life cycle",
        "caseB" => "Tesla Optimus robot height",
        "caseC" => "a glass of cold brew",
        _ => panic!("unknown case {case}"),
    };
    UserPrompt::new(case, text)
}

/// caseA: one loop round. caseB: adaptive [Retrieval, Refine]. caseC: no images anywhere.
pub fn scenario(case: &str) -> Scenario {
    let model = ScriptedModel::new();
    match case {
        "caseA" => {
            model.push(InstructionRole::QueryPlanning, plan(&["frog eggs", "tadpole gills"], &["froglet"]));
            model.push(InstructionRole::TextFilter, r#"{"keep": [1, 3]}"#);
            model.push(InstructionRole::ImageFilter, r#"{"keep": [2]}"#);
            Scenario::new(model)
        }
        "caseB" => {
            model.push(InstructionRole::QueryPlanning, plan(&["Optimus height cm"], &["Optimus robot standing"]));
            model.push(InstructionRole::QueryPlanning, plan(&["Optimus Gen 2 hands"], &["Optimus Gen 2"]));
            model.push(InstructionRole::ImageFilter, r#"{"keep": [1, 2]}"#);
            model.push(InstructionRole::TextFilter, r#"{"keep": [2]}"#);
            model.push(InstructionRole::ImageFilter, r#"{"keep": [4]}"#);
            model.push(InstructionRole::Sufficiency, r#"{"decision": "Retrieval", "rationale": "hands unclear"}"#);
            model.push(InstructionRole::Sufficiency, r#"{"decision": "Refine", "rationale": "enough"}"#);
            model.push(
                InstructionRole::ContentRefine,
                r#"{"textual_features": ["about 173 cm tall", "white and black shell"], "keep_images": [1, 3]}"#,
            );
            Scenario::new(model)
        }
        "caseC" => {
            model.push(InstructionRole::QueryPlanning, plan(&["cold brew color"], &["cold brew glass"]));
            let clock = VirtualClock::new();
            Scenario::build(
                clock.clone(),
                model.with_clock(clock.clone(), 40),
                ScriptedSearch::new().synthetic(10, 0).with_clock(clock.clone(), 300),
                ScriptedReader::new().with_clock(clock.clone(), 500),
                ScriptedDownloader::new().with_clock(clock.clone(), 150),
            )
        }
        _ => panic!("unknown case {case}"),
    }
}

/// Record `case` into `dir` (replacing it).
pub fn record_case(case: &str, dir: &Path) -> RunBundle {
    let _ = std::fs::remove_dir_all(dir);
    std::fs::create_dir_all(dir).unwrap();
    let sc = scenario(case);
    run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(case), &RunConfig::default(), Some(dir)).unwrap()
}

pub const DATASET: &str = r#"{
  "version": 1,
  "prompts": [
    {"id": "caseA", "text": "frog life cycle", "entity_class": "Animal"},
    {"id": "caseB", "text": "Tesla Optimus robot height", "entity_class": "Products"},
    {"id": "caseC", "text": "a glass of cold brew", "entity_class": "Food"}
  ],
  "features": [
    {"prompt_id": "caseA", "statement": "Tadpoles hatch from eggs laid in water.", "concept": "TC"},
    {"prompt_id": "caseA", "statement": "Adult frogs have no tail.", "concept": "PF"},
    {"prompt_id": "caseB", "statement": "The robot stands about 173 cm tall.", "concept": "PF"},
    {"prompt_id": "caseC", "statement": "Cold brew is usually served over ice.", "concept": "CC"},
    {"prompt_id": "caseC", "statement": "An unsupported claim about caffeine content.", "concept": "PF"}
  ],
  "questions": [
    {"prompt_id": "caseA", "statement": "A tadpole with a visible tail is shown.", "concept": "PF"},
    {"prompt_id": "caseA", "statement": "The adult frog sits beside the eggs.", "concept": "CC"},
    {"prompt_id": "caseA", "statement": "The frog is bright blue.", "concept": "TC"},
    {"prompt_id": "caseB", "statement": "The robot is humanoid.", "concept": "PF"},
    {"prompt_id": "caseB", "statement": "The robot matches the reference photo.", "concept": "PF",
     "needs_reference_image": true, "reference_blob": "refs/caseB.png"},
    {"prompt_id": "caseB", "statement": "The proportions are ambiguous.", "concept": "CC"},
    {"prompt_id": "caseC", "statement": "The drink is dark brown.", "concept": "PF"},
    {"prompt_id": "caseC", "statement": "Ice cubes float in the glass.", "concept": "TC"}
  ]
}
"#;

pub fn reference_png() -> Vec<u8> {
    png_bytes("reference robot")
}

/// Judge: statements mentioning "blue" are False, "ambiguous" gets an unusable reply,
/// facts mentioning "unsupported" are not aligned.
pub fn judge_model() -> ScriptedModel {
    ScriptedModel::new()
        .on(InstructionRole::JudgeQuestion, |c| {
            let s = line_value(&c.prompt, "Statement:").unwrap_or("");
            Ok(ModelReply::text(if s.contains("blue") {
                r#"{"verdict": "False"}"#
            } else if s.contains("ambiguous") {
                "I cannot tell."
            } else {
                "Answer: TRUE."
            }))
        })
        .on(InstructionRole::JudgeAlignment, |c| {
            let s = line_value(&c.prompt, "Fact:").unwrap_or("");
            Ok(ModelReply::text(if s.contains("unsupported") { "False" } else { "True" }))
        })
}

pub fn eval_options() -> EvalOptions {
    let config = RunConfig::default();
    EvalOptions {
        digest_chars: config.digest_max_chars,
        judge_id: config.gateways.model.clone(),
        ..EvalOptions::default()
    }
}

/// Evaluate the golden runs with a fresh scripted judge in record mode.
pub fn record_eval(dataset: &Dataset) -> (EvalReport, String) {
    let clock = VirtualClock::new();
    let services = Services::builder()
        .model(Arc::new(judge_model().with_clock(clock.clone(), 40)))
        .clock(Arc::new(clock))
        .build();
    let session = Session::new(Arc::new(services), Cassette::new(CassetteMode::Record), BlobStore::new());
    let options = eval_options();
    let judge = Judge::new(&session, options.judge_id.clone());
    let report = evaluate_run(dataset, &runs_dir(), &judge, &options).unwrap();
    (report, session.cassette_jsonl())
}

pub fn regenerate() {
    for case in CASES {
        let bundle = record_case(case, &runs_dir().join(case));
        assert!(bundle.error.is_none(), "{case}: {:?}", bundle.error);
    }
    let eval = eval_dir();
    std::fs::create_dir_all(eval.join("refs")).unwrap();
    std::fs::write(eval.join("dataset.json"), DATASET).unwrap();
    std::fs::write(eval.join("refs/caseB.png"), reference_png()).unwrap();
    let dataset = Dataset::load(&eval.join("dataset.json")).unwrap();
    let (report, cassette) = record_eval(&dataset);
    report.write(&eval.join("expected")).unwrap();
    std::fs::write(eval.join("judge.jsonl"), cassette).unwrap();
}

/// Files compared byte-for-byte between a run directory and its golden counterpart.
pub const RUN_ARTIFACTS: [&str; 3] = ["enriched_prompt.json", "kb/manifest.json", "cost_report.json"];

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
