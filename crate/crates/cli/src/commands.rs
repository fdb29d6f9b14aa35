use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context};
use orig_core::fig_eval::{evaluate_run, Dataset, EvalError, EvalOptions, EvalReport, Judge, REPORT_FILE};
use orig_core::gateways::{Cassette, CassetteMode, CassetteSpec, Services, Session};
use orig_core::knowledge::{BlobStore, UserPrompt, MANIFEST_FILE};
use orig_core::pipeline::{
    self, CostReport, PipelineError, RunBundle, RunConfig, RunStatus, CASSETTE_FILE, COST_FILE, ENRICHED_FILE,
    KB_DIR, RUN_MANIFEST_FILE,
};

use crate::{
    BatchArgs, EvalArgs, PipelineArgs, ReplayVerifyArgs, ReportArgs, RunArgs, EXIT_COVERAGE, EXIT_FAILED, EXIT_USAGE,
};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    fn failed(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_FAILED,
            error: error.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut config = match path {
        Some(p) => RunConfig::load(p).map_err(Failure::usage)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(overrides).map_err(Failure::usage)?;
    Ok(config)
}

fn pipeline_config(args: &PipelineArgs) -> Result<RunConfig, Failure> {
    let mut config = load_config(args.config.as_deref(), &args.set)?;
    if let Some(policy) = args.policy {
        config.policy = policy;
    }
    if args.skip_generation {
        config.skip_generation = true;
    }
    config.validate().map_err(Failure::usage)?;
    Ok(config)
}

/// Cassette spec from the flag, else from the configuration's `cassette` key.
fn cassette_spec(flag: Option<&CassetteSpec>, config: &RunConfig) -> Result<CassetteSpec, Failure> {
    match flag {
        Some(s) => Ok(s.clone()),
        None => config
            .cassette
            .parse()
            .map_err(|e: String| Failure::usage(anyhow!("config key cassette: {e}"))),
    }
}

fn mode_of(spec: &CassetteSpec) -> CassetteMode {
    match spec {
        CassetteSpec::Record(_) => CassetteMode::Record,
        CassetteSpec::Replay(_) => CassetteMode::Replay,
        CassetteSpec::Off => CassetteMode::Passthrough,
    }
}

fn open_cassette(mode: CassetteMode, replay_path: Option<&Path>) -> Result<Cassette, Failure> {
    match (mode, replay_path) {
        (CassetteMode::Replay, Some(path)) => Cassette::load(path, mode).map_err(Failure::usage),
        _ => Ok(Cassette::new(mode)),
    }
}

fn services(config: &RunConfig, mode: CassetteMode) -> Result<Arc<Services>, Failure> {
    Ok(Arc::new(config.services(mode).map_err(Failure::usage)?))
}

fn pipeline_failure(e: PipelineError) -> Failure {
    if matches!(e, PipelineError::Config(_) | PipelineError::Prompt(_)) {
        Failure::usage(e)
    } else {
        Failure::failed(e)
    }
}

fn copy_cassette(run_dir: &Path, dest: &Path) -> anyhow::Result<()> {
    let src = run_dir.join(CASSETTE_FILE);
    if src != dest {
        if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::copy(&src, dest).with_context(|| format!("writing cassette {}", dest.display()))?;
    }
    Ok(())
}

fn summarize(id: &str, dir: &Path, bundle: &RunBundle) {
    let t = &bundle.cost.totals;
    println!(
        "{id}: {:?} in {} iteration(s), {} searches, {} model calls, {} input / {} output tokens -> {}",
        bundle.status,
        t.loop_iterations,
        t.retrieval_calls,
        t.model_calls,
        t.input_tokens,
        t.output_tokens,
        dir.display()
    );
}

fn bundle_result(bundle: &RunBundle) -> CmdResult {
    if bundle.status == RunStatus::Done {
        Ok(())
    } else {
        Err(Failure::failed(anyhow!(
            "run failed: {}",
            bundle.error.as_deref().unwrap_or("unknown error")
        )))
    }
}

pub fn run(args: RunArgs) -> CmdResult {
    let config = pipeline_config(&args.pipeline)?;
    let prompt = match &args.dataset {
        Some(path) => {
            let ds = Dataset::load(path).map_err(Failure::usage)?;
            let p = ds
                .prompt(&args.prompt)
                .ok_or_else(|| Failure::usage(anyhow!("prompt id {:?} is not in {}", args.prompt, path.display())))?;
            p.to_user_prompt(&ds.questions)
        }
        None => UserPrompt::new(&args.prompt_id, &args.prompt),
    };
    let spec = cassette_spec(args.cassette.as_ref(), &config)?;
    let mode = mode_of(&spec);
    let cassette = open_cassette(mode, match &spec {
        CassetteSpec::Replay(p) => Some(p),
        _ => None,
    })?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(Failure::usage)?;
    let bundle = pipeline::run(services(&config, mode)?, cassette, &prompt, &config, Some(&args.out))
        .map_err(pipeline_failure)?;
    if let CassetteSpec::Record(path) = &spec {
        copy_cassette(&args.out, path).map_err(Failure::failed)?;
    }
    summarize(&prompt.id, &args.out, &bundle);
    bundle_result(&bundle)
}

pub fn batch(args: BatchArgs) -> CmdResult {
    let config = pipeline_config(&args.pipeline)?;
    let ds = Dataset::load(&args.dataset).map_err(Failure::usage)?;
    if ds.prompts.is_empty() {
        return Err(Failure::usage(anyhow!("{}: no prompts", args.dataset.display())));
    }
    let spec = cassette_spec(args.cassette.as_ref(), &config)?;
    let mode = mode_of(&spec);
    let services = services(&config, mode)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(Failure::usage)?;

    let prompts: Vec<UserPrompt> = ds.prompts.iter().map(|p| p.to_user_prompt(&ds.questions)).collect();
    // cassettes are opened up front so that a missing replay file is a usage error
    let mut cassettes = Vec::with_capacity(prompts.len());
    for p in &prompts {
        let path = match &spec {
            CassetteSpec::Replay(dir) => Some(dir.join(format!("{}.jsonl", p.id))),
            _ => None,
        };
        cassettes.push(Mutex::new(Some(open_cassette(mode, path.as_deref())?)));
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<RunBundle, PipelineError>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..args.workers.max(1).min(prompts.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(prompt) = prompts.get(i) else { break };
                let cassette = cassettes[i].lock().expect("cassette slot").take().expect("taken once");
                let dir = args.out.join(&prompt.id);
                let r = pipeline::run(services.clone(), cassette, prompt, &config, Some(&dir));
                results.lock().expect("results").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results");
    results.sort_by_key(|(i, _)| *i);

    let mut failed = Vec::new();
    for (i, r) in results {
        let prompt = &prompts[i];
        let dir = args.out.join(&prompt.id);
        match r {
            Ok(bundle) => {
                summarize(&prompt.id, &dir, &bundle);
                if let CassetteSpec::Record(cdir) = &spec {
                    copy_cassette(&dir, &cdir.join(format!("{}.jsonl", prompt.id))).map_err(Failure::failed)?;
                }
                if bundle.status != RunStatus::Done {
                    failed.push(format!("{}: {}", prompt.id, bundle.error.unwrap_or_default()));
                }
            }
            Err(e) => {
                eprintln!("{}: {e}", prompt.id);
                failed.push(format!("{}: {e}", prompt.id));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::failed(anyhow!(
            "{} of {} run(s) failed:\n  {}",
            failed.len(),
            prompts.len(),
            failed.join("\n  ")
        )))
    }
}

pub fn eval(args: EvalArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&args.min_coverage) {
        return Err(Failure::usage(anyhow!("--min-coverage must be within [0, 1]")));
    }
    let config = load_config(args.config.as_deref(), &args.set)?;
    let ds = Dataset::load(&args.dataset).map_err(Failure::usage)?;
    if ds.prompts.is_empty() {
        return Err(Failure::usage(anyhow!("{}: no prompts", args.dataset.display())));
    }
    if !args.runs_dir.is_dir() {
        return Err(Failure::usage(anyhow!("runs directory {} does not exist", args.runs_dir.display())));
    }
    let spec = args.judge_cassette.clone().unwrap_or(CassetteSpec::Off);
    let mode = mode_of(&spec);
    let cassette = open_cassette(mode, match &spec {
        CassetteSpec::Replay(p) => Some(p),
        _ => None,
    })?;
    let session = Session::new(services(&config, mode)?, cassette, BlobStore::new());
    let judge = Judge::new(&session, config.gateways.model.clone());
    let options = EvalOptions {
        digest_chars: config.digest_max_chars,
        judge_id: config.gateways.model.clone(),
        ..EvalOptions::default()
    };
    let report = evaluate_run(&ds, &args.runs_dir, &judge, &options).map_err(|e| match e {
        EvalError::Dataset(_) | EvalError::NoPrompts => Failure::usage(e),
        e => Failure::failed(e),
    })?;
    report.write(&args.out).map_err(Failure::failed)?;
    if let CassetteSpec::Record(path) = &spec {
        std::fs::write(path, session.cassette_jsonl())
            .with_context(|| format!("writing judge cassette {}", path.display()))
            .map_err(Failure::failed)?;
    }
    print!("{}", report.render());
    if report.coverage.ratio() < args.min_coverage {
        return Err(Failure {
            code: EXIT_COVERAGE,
            error: anyhow!(
                "coverage {} ({:.3}) is below the required {:.3}",
                report.coverage,
                report.coverage.ratio(),
                args.min_coverage
            ),
        });
    }
    Ok(())
}

/// Artifacts compared by `replay-verify`, relative to the run directory.
fn verified_artifacts() -> [PathBuf; 3] {
    [
        PathBuf::from(ENRICHED_FILE),
        Path::new(KB_DIR).join(MANIFEST_FILE),
        PathBuf::from(COST_FILE),
    ]
}

pub fn replay_verify(args: ReplayVerifyArgs) -> CmdResult {
    let dir = pipeline::RunDir::new(&args.run_dir);
    let manifest = dir
        .read_manifest()
        .with_context(|| format!("{} is not a run directory (no {RUN_MANIFEST_FILE})", args.run_dir.display()))
        .map_err(Failure::usage)?;
    let cassette_path = dir.path(CASSETTE_FILE);
    if !cassette_path.is_file() {
        return Err(Failure::usage(anyhow!("{} has no {CASSETTE_FILE}", args.run_dir.display())));
    }
    let cassette = open_cassette(CassetteMode::Replay, Some(&cassette_path))?;
    let scratch = tempfile::tempdir().context("creating scratch directory").map_err(Failure::failed)?;
    let bundle = pipeline::run(
        services(&manifest.config, CassetteMode::Replay)?,
        cassette,
        &manifest.prompt,
        &manifest.config,
        Some(scratch.path()),
    )
    .map_err(pipeline_failure)?;
    if bundle.determinism_failure {
        return Err(Failure::failed(anyhow!(
            "replay diverged: {}",
            bundle.error.as_deref().unwrap_or("determinism error")
        )));
    }
    for rel in verified_artifacts() {
        let original = std::fs::read(args.run_dir.join(&rel)).ok();
        let replayed = std::fs::read(scratch.path().join(&rel)).ok();
        if original != replayed {
            return Err(Failure::failed(anyhow!("replay differs from the recorded run at {}", rel.display())));
        }
    }
    println!("{}: replay identical ({:?})", args.run_dir.display(), bundle.status);
    Ok(())
}

pub fn report(args: ReportArgs) -> CmdResult {
    let eval_json = args.dir.join(REPORT_FILE);
    if eval_json.is_file() {
        let bytes = std::fs::read(&eval_json).map_err(Failure::usage)?;
        let report: EvalReport = serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing {}", eval_json.display()))
            .map_err(Failure::usage)?;
        print!("{}", report.render());
        return Ok(());
    }
    let cost_json = args.dir.join(COST_FILE);
    if cost_json.is_file() {
        let bytes = std::fs::read(&cost_json).map_err(Failure::usage)?;
        let cost: CostReport = serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing {}", cost_json.display()))
            .map_err(Failure::usage)?;
        if let Ok(enriched) = std::fs::read(args.dir.join(ENRICHED_FILE)) {
            if let Ok(p) = serde_json::from_slice::<pipeline::EnrichedPrompt>(&enriched) {
                println!("Enriched prompt:\n{}\n", p.prompt_text);
            }
        }
        print!("{}", cost.render_table());
        return Ok(());
    }
    Err(Failure::usage(anyhow!(
        "{} holds neither {REPORT_FILE} nor {COST_FILE}",
        args.dir.display()
    )))
}
