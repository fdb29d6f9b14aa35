use std::sync::Arc;

use orig_core::accounting::Stage;
use orig_core::gateways::{parse_jsonl, Cassette, CassetteMode, Decision, InstructionRole, ModelReply, ServiceKind, Session, TOKEN_ESTIMATOR};
use orig_core::knowledge::{BlobStore, UserPrompt};
use orig_core::pipeline::{
    resume, run, DecisionSource, IterationPolicy, Pipeline, PipelineError, RunConfig, RunDir, RunManifest, RunStatus,
};
use orig_core::scripted::{replay_services, Scenario, ScriptedGenerator, ScriptedModel};

fn plan(text: &[&str], image: &[&str]) -> String {
    let mut qs: Vec<serde_json::Value> = text
        .iter()
        .map(|q| serde_json::json!({"modality": "text", "query": q}))
        .collect();
    qs.extend(image.iter().map(|q| serde_json::json!({"modality": "image", "query": q})));
    serde_json::json!({"sub_questions": ["what does it look like?"], "queries": qs}).to_string()
}

fn prompt() -> UserPrompt {
    UserPrompt::new("p1", "frog life cycle")
}

fn config(policy: IterationPolicy) -> RunConfig {
    RunConfig {
        policy,
        ..RunConfig::default()
    }
}

#[test]
fn adaptive_retrieval_then_refine() {
    let model = ScriptedModel::new();
    model.push(InstructionRole::QueryPlanning, plan(&["frog eggs"], &["tadpole"]));
    model.push(InstructionRole::QueryPlanning, plan(&["froglet legs"], &[]));
    model.push(InstructionRole::Sufficiency, r#"{"decision":"Retrieval"}"#);
    model.push(InstructionRole::Sufficiency, r#"{"decision":"Refine"}"#);
    let sc = Scenario::new(model);
    let bundle = run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &config(IterationPolicy::Adaptive), None).unwrap();
    assert_eq!(bundle.status, RunStatus::Done, "{:?}", bundle.error);
    assert_eq!(bundle.state.round, 2);
    assert_eq!(bundle.cost.totals.loop_iterations, 3);
    let values: Vec<_> = bundle.decisions().iter().map(|d| d.value).collect();
    assert_eq!(values, [Decision::Retrieval, Decision::Refine]);
    assert_eq!(bundle.cost.totals.text_retrievals, 3);
    assert_eq!(bundle.cost.totals.image_retrievals, 1);
    assert_eq!(bundle.kb().texts().len(), 6);
    assert_eq!(bundle.kb().images().len(), 5);
    assert!(bundle.artifact.is_some());
    assert_eq!(bundle.enriched().unwrap().refined_images.len(), 5);
}

#[test]
fn always_retrieval_hits_cap() {
    let model = ScriptedModel::new()
        .on(InstructionRole::QueryPlanning, |_| Ok(ModelReply::text(plan(&["more"], &[]))))
        .on(InstructionRole::Sufficiency, |_| Ok(ModelReply::text(r#"{"decision":"Retrieval"}"#)));
    let sc = Scenario::new(model);
    let bundle = run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &config(IterationPolicy::Adaptive), None).unwrap();
    assert_eq!(bundle.status, RunStatus::Done);
    let d: Vec<_> = bundle.decisions().iter().map(|d| (d.value, d.source)).collect();
    assert_eq!(
        d,
        [
            (Decision::Retrieval, DecisionSource::Model),
            (Decision::Retrieval, DecisionSource::Model),
            (Decision::Refine, DecisionSource::Cap)
        ]
    );
    assert_eq!(sc.model.count(InstructionRole::Sufficiency), 2);
    assert!(bundle.state.warnings.iter().any(|w| w.contains("round cap")));
}

#[test]
fn fixed_rounds_skip_sufficiency_model() {
    for n in 1..=3u32 {
        let model = ScriptedModel::new()
            .on(InstructionRole::QueryPlanning, |_| Ok(ModelReply::text(plan(&["q"], &["v"]))));
        let sc = Scenario::new(model);
        let bundle = run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &config(IterationPolicy::FixedRounds(n)), None).unwrap();
        assert_eq!(bundle.cost.totals.loop_iterations, n + 1);
        assert_eq!(sc.model.count(InstructionRole::Sufficiency), 0);
    }
}

#[test]
fn generation_failure_keeps_enriched_prompt() {
    let sc = Scenario::new(ScriptedModel::new()).generator(ScriptedGenerator::failing());
    let bundle = run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &RunConfig::default(), None).unwrap();
    assert_eq!(bundle.status, RunStatus::Failed);
    assert!(bundle.enriched().is_some());
    assert!(bundle.error.unwrap().contains("image_gen"));
}

fn tmp_path() -> std::path::PathBuf {
    std::path::PathBuf::from("cassette.jsonl")
}

/// Model handlers keyed by role, so replies do not depend on call order.
fn steady_model() -> ScriptedModel {
    ScriptedModel::new()
        .on(InstructionRole::QueryPlanning, |_| Ok(ModelReply::text(plan(&["frog eggs", "frog legs"], &["tadpole"]))))
        .on(InstructionRole::Sufficiency, |_| Ok(ModelReply::text(r#"{"decision":"Retrieval"}"#)))
}

#[test]
fn exchanges_follow_stage_order() {
    let sc = Scenario::new(steady_model());
    let bundle = run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &RunConfig::default(), None).unwrap();
    assert_eq!(bundle.status, RunStatus::Done);
    let key = |stage: Stage, round: u32| match stage {
        Stage::Bootstrap => (0, 0, stage),
        Stage::QueryPlanning | Stage::KnowledgeAccumulation => (1, round, stage),
        _ => (2, 0, stage),
    };
    let keys: Vec<_> = bundle
        .state
        .exchanges
        .iter()
        .map(|r| key(r.stage.expect("every exchange has a stage"), r.round))
        .collect();
    assert!(keys.windows(2).all(|w| w[0] <= w[1]), "{keys:?}");
    let stages: Vec<Stage> = keys.iter().map(|k| k.2).collect();
    for s in Stage::TABLE.into_iter().chain([Stage::Generation]) {
        assert!(stages.contains(&s), "no exchange in {s:?}");
    }
    assert_eq!(bundle.state.exchanges.last().unwrap().service, ServiceKind::ImageGen);
}

#[test]
fn replay_reproduces_recorded_run() {
    let sc = Scenario::new(steady_model());
    let recorded = run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &RunConfig::default(), None).unwrap();
    let session_entries = {
        let tmp = tempfile::tempdir().unwrap();
        let sc = Scenario::new(steady_model());
        run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &RunConfig::default(), Some(tmp.path())).unwrap();
        std::fs::read_to_string(tmp.path().join("cassette.jsonl")).unwrap()
    };
    let entries = parse_jsonl(&tmp_path(), &session_entries).unwrap();
    let cassette = Cassette::with_entries(CassetteMode::Replay, entries);
    let replayed = run(replay_services(), cassette, &prompt(), &RunConfig::default(), None).unwrap();
    assert_eq!(replayed.status, RunStatus::Done);
    assert_eq!(replayed.enriched(), recorded.enriched());
    assert_eq!(replayed.cost, recorded.cost);
    assert_eq!(replayed.kb(), recorded.kb());
}

#[test]
fn replay_with_wrong_prompt_is_a_determinism_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = Scenario::new(steady_model());
    run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &RunConfig::default(), Some(tmp.path())).unwrap();
    let text = std::fs::read_to_string(tmp.path().join("cassette.jsonl")).unwrap();
    let cassette = Cassette::with_entries(CassetteMode::Replay, parse_jsonl(&tmp_path(), &text).unwrap());
    let other = UserPrompt::new("p1", "toad life cycle");
    let bundle = run(replay_services(), cassette, &other, &RunConfig::default(), None).unwrap();
    assert_eq!(bundle.status, RunStatus::Failed);
    assert!(bundle.determinism_failure);
}

#[test]
fn empty_plan_skips_retrieval_but_still_decides() {
    let model = ScriptedModel::new();
    model.push(InstructionRole::QueryPlanning, r#"{"sub_questions": [], "queries": []}"#);
    model.push(InstructionRole::Sufficiency, r#"{"decision":"Refine"}"#);
    let sc = Scenario::new(model);
    let bundle = run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &config(IterationPolicy::Adaptive), None).unwrap();
    assert_eq!(bundle.status, RunStatus::Done);
    assert_eq!(bundle.state.round, 1);
    assert_eq!(bundle.cost.totals.loop_iterations, 2);
    assert_eq!(bundle.decisions().len(), 1);
    assert!(!bundle
        .state
        .exchanges
        .iter()
        .any(|r| r.round == 1 && r.service.is_search()));
    assert!(bundle.state.rounds[1].raw_texts.is_empty() && bundle.state.rounds[1].raw_images.is_empty());
}

#[test]
fn skip_generation_stops_after_extension() {
    let sc = Scenario::new(steady_model());
    let cfg = RunConfig {
        skip_generation: true,
        ..RunConfig::default()
    };
    let bundle = run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &cfg, None).unwrap();
    assert_eq!(bundle.status, RunStatus::Done);
    assert!(bundle.enriched().is_some());
    assert!(bundle.artifact.is_none());
    assert!(!bundle.state.exchanges.iter().any(|r| r.service == ServiceKind::ImageGen));
}

#[test]
fn blank_prompt_is_rejected_before_any_call() {
    let sc = Scenario::new(ScriptedModel::new());
    let err = run(sc.services(), Cassette::new(CassetteMode::Record), &UserPrompt::new("b", "  \n"), &RunConfig::default(), None)
        .unwrap_err();
    assert!(matches!(err, PipelineError::Prompt(_)));
    assert!(sc.model.calls().is_empty());
}

#[test]
fn resume_continues_from_checkpoint() {
    let full = {
        let sc = Scenario::new(steady_model());
        run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &RunConfig::default(), None).unwrap()
    };

    // Interrupt after bootstrap and the first loop round.
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig::default();
    let sc = Scenario::new(steady_model());
    let session = Session::new(sc.services(), Cassette::new(CassetteMode::Record), BlobStore::new());
    let dir = RunDir::new(tmp.path());
    dir.write_manifest(&RunManifest {
        version: 1,
        prompt: prompt(),
        config: config.clone(),
        token_estimator: TOKEN_ESTIMATOR.to_string(),
        cassette_mode: CassetteMode::Record,
    })
    .unwrap();
    let pipeline = Pipeline::new(&session, &config);
    let mut state = pipeline.bootstrap(&prompt()).unwrap();
    pipeline.step(&mut state).unwrap();
    assert_eq!(state.status, RunStatus::Looping);
    dir.checkpoint(&state, &session).unwrap();

    let sc = Scenario::new(steady_model());
    let cassette = Cassette::with_entries(CassetteMode::Record, session.cassette_entries());
    let resumed = resume(sc.services(), cassette, tmp.path()).unwrap();
    assert_eq!(resumed.status, RunStatus::Done);
    assert_eq!(resumed.enriched(), full.enriched());
    assert_eq!(resumed.cost.totals, full.cost.totals);
    assert_eq!(resumed.state.exchanges.len(), full.state.exchanges.len());
}

#[test]
fn resume_refuses_failed_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = Scenario::new(ScriptedModel::new()).generator(ScriptedGenerator::failing());
    run(sc.services(), Cassette::new(CassetteMode::Record), &prompt(), &RunConfig::default(), Some(tmp.path())).unwrap();
    let err = resume(Arc::new(orig_core::gateways::Services::builder().build()), Cassette::new(CassetteMode::Record), tmp.path())
        .unwrap_err();
    assert!(matches!(err, PipelineError::Precondition(_)));
}
