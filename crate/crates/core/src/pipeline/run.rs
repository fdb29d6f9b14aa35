//! Whole-run driver and the on-disk run directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::fsutil;
use crate::gateways::{Cassette, CassetteMode, GenerationArtifact, Services, Session, TOKEN_ESTIMATOR};
use crate::knowledge::{load_blobs, BlobStore, KnowledgeBase, UserPrompt};

use super::config::RunConfig;
use super::cost::CostReport;
use super::engine::{Pipeline, PipelineError};
use super::types::*;

pub const KB_DIR: &str = "kb";
pub const CASSETTE_FILE: &str = "cassette.jsonl";
pub const ENRICHED_FILE: &str = "enriched_prompt.json";
pub const COST_FILE: &str = "cost_report.json";
pub const COST_TABLE_FILE: &str = "cost_report.txt";
pub const ARTIFACT_DIR: &str = "artifact";
pub const STATE_FILE: &str = "run_state.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Inputs needed to re-execute a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub prompt: UserPrompt,
    pub config: RunConfig,
    pub token_estimator: String,
    pub cassette_mode: CassetteMode,
}

/// Everything a run produced. Failed runs keep their partial state.
#[derive(Debug, Clone)]
pub struct RunBundle {
    pub status: RunStatus,
    pub state: RunState,
    pub artifact: Option<GenerationArtifact>,
    pub cost: CostReport,
    pub error: Option<String>,
    /// True when the failure was a replay fingerprint mismatch.
    pub determinism_failure: bool,
}

impl RunBundle {
    pub fn enriched(&self) -> Option<&EnrichedPrompt> {
        self.state.enriched.as_ref()
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.state.kb
    }

    pub fn decisions(&self) -> &[SufficiencyDecision] {
        &self.state.decisions
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    fsutil::write_atomic(path, bytes).map_err(|e| io_err(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| io_err(path, format!("at `{}`: {}", e.path(), e.inner())))
}

/// Files of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), PipelineError> {
        write(&self.path(RUN_MANIFEST_FILE), &fsutil::to_json_bytes(manifest).expect("manifest serializes"))
    }

    pub fn read_manifest(&self) -> Result<RunManifest, PipelineError> {
        read_json(&self.path(RUN_MANIFEST_FILE))
    }

    /// Persist state, knowledge base, and cassette at a stage boundary.
    pub fn checkpoint(&self, state: &RunState, session: &Session) -> Result<(), PipelineError> {
        state.kb.save(&self.path(KB_DIR), session.blobs())?;
        write(&self.path(STATE_FILE), &fsutil::to_json_bytes(state).expect("state serializes"))?;
        if session.mode() != CassetteMode::Passthrough {
            write(&self.path(CASSETTE_FILE), session.cassette_jsonl().as_bytes())?;
        }
        Ok(())
    }

    /// Write the final outputs of a (possibly failed) run.
    pub fn finish(&self, bundle: &RunBundle, session: &Session) -> Result<(), PipelineError> {
        self.checkpoint(&bundle.state, session)?;
        if let Some(enriched) = &bundle.state.enriched {
            write(&self.path(ENRICHED_FILE), &fsutil::to_json_bytes(enriched).expect("prompt serializes"))?;
        }
        write(&self.path(COST_FILE), &bundle.cost.to_json())?;
        write(&self.path(COST_TABLE_FILE), bundle.cost.render_table().as_bytes())?;
        if let Some(artifact) = &bundle.artifact {
            let dir = self.path(ARTIFACT_DIR);
            artifact.save(&dir).map_err(|e| io_err(&dir, e))?;
        }
        Ok(())
    }

    /// Load the checkpointed state, its knowledge base, and image blobs.
    pub fn load_state(&self, blobs: &BlobStore) -> Result<RunState, PipelineError> {
        let mut state: RunState = read_json(&self.path(STATE_FILE))?;
        let kb_dir = self.path(KB_DIR);
        state.kb = KnowledgeBase::load(&kb_dir)?;
        load_blobs(&kb_dir, blobs)?;
        Ok(state)
    }
}

/// Drive `state` to completion, checkpointing after every stage.
fn drive(
    session: &Session,
    config: &RunConfig,
    mut state: RunState,
    dir: Option<&RunDir>,
) -> Result<RunBundle, PipelineError> {
    let pipeline = Pipeline::new(session, config);
    let mut artifact = None;
    let mut error = None;
    let mut determinism_failure = false;
    while !matches!(state.status, RunStatus::Done | RunStatus::Failed) {
        match pipeline.step(&mut state) {
            Ok(a) => artifact = a.or(artifact),
            Err(e) => {
                tracing::error!(error = %e, status = ?state.status, "run failed");
                determinism_failure = e.is_determinism();
                pipeline.sync(&mut state);
                state.failure = Some(format!("{:?}: {e}", state.status));
                state.status = RunStatus::Failed;
                error = Some(e.to_string());
            }
        }
        if let Some(dir) = dir {
            dir.checkpoint(&state, session)?;
        }
    }
    pipeline.sync(&mut state);
    let cost = CostReport::from_log(&state.exchanges, state.loop_iterations());
    let bundle = RunBundle {
        status: state.status,
        state,
        artifact,
        cost,
        error,
        determinism_failure,
    };
    if let Some(dir) = dir {
        dir.finish(&bundle, session)?;
    }
    Ok(bundle)
}

/// Execute a full run for `prompt`. When `run_dir` is given, the run directory is
/// populated and checkpointed at every stage boundary.
pub fn run(
    services: Arc<Services>,
    cassette: Cassette,
    prompt: &UserPrompt,
    config: &RunConfig,
    run_dir: Option<&Path>,
) -> Result<RunBundle, PipelineError> {
    config.validate()?;
    prompt.validate()?;
    let mode = cassette.mode();
    let session = Session::new(services, cassette, BlobStore::new());
    let dir = run_dir.map(RunDir::new);
    if let Some(dir) = &dir {
        dir.write_manifest(&RunManifest {
            version: 1,
            prompt: prompt.clone(),
            config: config.clone(),
            token_estimator: TOKEN_ESTIMATOR.to_string(),
            cassette_mode: mode,
        })?;
    }
    let pipeline = Pipeline::new(&session, config);
    let state = match pipeline.bootstrap(prompt) {
        Ok(state) => state,
        Err(e) => {
            let mut state = RunState::new(prompt.clone());
            pipeline.sync(&mut state);
            state.failure = Some(format!("Bootstrapping: {e}"));
            state.status = RunStatus::Failed;
            let cost = CostReport::from_log(&state.exchanges, state.loop_iterations());
            let bundle = RunBundle {
                status: RunStatus::Failed,
                determinism_failure: e.is_determinism(),
                error: Some(e.to_string()),
                state,
                artifact: None,
                cost,
            };
            if let Some(dir) = &dir {
                dir.finish(&bundle, &session)?;
            }
            return Ok(bundle);
        }
    };
    if let Some(dir) = &dir {
        dir.checkpoint(&state, &session)?;
    }
    drive(&session, config, state, dir.as_ref())
}

/// Continue an interrupted run from its last checkpoint. `cassette` should hold the
/// run's existing entries (recording continues by appending to them).
pub fn resume(
    services: Arc<Services>,
    cassette: Cassette,
    run_dir: &Path,
) -> Result<RunBundle, PipelineError> {
    let dir = RunDir::new(run_dir);
    let manifest = dir.read_manifest()?;
    manifest.config.validate()?;
    let blobs = BlobStore::new();
    let mut state = dir.load_state(&blobs)?;
    if state.status == RunStatus::Failed {
        return Err(PipelineError::Precondition(format!(
            "run in {} failed ({}); start a new run instead",
            run_dir.display(),
            state.failure.as_deref().unwrap_or("unknown failure")
        )));
    }
    let session = Session::new(services, cassette, blobs);
    session.restore_log(std::mem::take(&mut state.exchanges));
    state.exchanges = session.exchange_log();
    drive(&session, &manifest.config, state, Some(&dir))
}
