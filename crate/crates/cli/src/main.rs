//! `orig`: run retrieval pipelines, verify replays, evaluate datasets, render reports.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use orig_core::gateways::CassetteSpec;
use orig_core::pipeline::IterationPolicy;

/// Exit codes.
pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_FAILED: u8 = 2;
pub const EXIT_COVERAGE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "orig", version, about = "Retrieval-augmented prompt enrichment and QA-based evaluation")]
#[command(after_help = "Exit codes: 0 success, 1 usage error, 2 run or determinism failure, 3 coverage below threshold.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the pipeline for one prompt.
    Run(RunArgs),
    /// Run every prompt of a dataset into <out>/<prompt_id>/.
    Batch(BatchArgs),
    /// Judge finished runs against a dataset and write report.json + report.txt.
    Eval(EvalArgs),
    /// Re-execute a recorded run from its cassette and byte-compare its outputs.
    ReplayVerify(ReplayVerifyArgs),
    /// Print the rendered report of a run or evaluation directory.
    Report(ReportArgs),
}

/// Settings shared by `run` and `batch`. Precedence: config file, then `--set`, then
/// the dedicated flags.
#[derive(Debug, Args)]
struct PipelineArgs {
    /// TOML run configuration (defaults when omitted).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a configuration key after the file is loaded (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Iteration policy: adaptive or fixed:<n>.
    #[arg(long, value_name = "POLICY")]
    policy: Option<IterationPolicy>,
    /// Stop after prompt extension; no image is generated.
    #[arg(long)]
    skip_generation: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Prompt text, or a prompt id when --dataset is given.
    #[arg(long, value_name = "TEXT")]
    prompt: String,
    /// Id recorded for a free-text prompt.
    #[arg(long, value_name = "ID", default_value = "prompt")]
    prompt_id: String,
    /// Dataset to look the prompt id up in.
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
    /// record:<path>, replay:<path>, or off.
    #[arg(long, value_name = "SPEC")]
    cassette: Option<CassetteSpec>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
struct BatchArgs {
    #[arg(long, value_name = "PATH")]
    dataset: PathBuf,
    /// Directory receiving one run directory per prompt.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// record:<dir>, replay:<dir>, or off; the directory holds <prompt_id>.jsonl files.
    #[arg(long, value_name = "SPEC")]
    cassette: Option<CassetteSpec>,
    /// Concurrent pipelines sharing one set of rate-limited gateways.
    #[arg(long, value_name = "N", default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    dataset: PathBuf,
    /// Directory holding one run directory per prompt id.
    #[arg(long, value_name = "DIR")]
    runs_dir: PathBuf,
    /// Directory receiving report.json and report.txt.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Configuration supplying the judge model gateway.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Judge cassette: record:<path>, replay:<path>, or off.
    #[arg(long, value_name = "SPEC")]
    judge_cassette: Option<CassetteSpec>,
    /// Fail with exit code 3 when fewer than this fraction of prompts were evaluated.
    #[arg(long, value_name = "FRACTION", default_value_t = 0.0)]
    min_coverage: f64,
}

#[derive(Debug, Args)]
struct ReplayVerifyArgs {
    /// Run directory containing run_manifest.json and cassette.jsonl.
    run_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Evaluation output directory or run directory.
    dir: PathBuf,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Batch(a) => commands::batch(a),
        Command::Eval(a) => commands::eval(a),
        Command::ReplayVerify(a) => commands::replay_verify(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
