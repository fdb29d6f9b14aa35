//! QA-based image judging, exact accuracy scoring, retrieval alignment, correlation
//! statistics, and report generation.

mod dataset;
mod judge;
mod report;
mod scoring;
mod stats;

pub use dataset::{Dataset, DatasetError, DatasetFeature, DatasetPrompt, EvalQuestion, DATASET_VERSION};
pub use judge::{AlignmentScore, FeatureAlignment, Judge, REFERENCE_NOTE};
pub use report::{
    evaluate_run, AlignmentSummary, Coverage, EvalError, EvalOptions, EvalReport, PromptEval, SkippedPrompt, Summary,
    REPORT_FILE, REPORT_TABLE_FILE, REPORT_VERSION,
};
pub use scoring::{
    macro_average, score_prompt, Averaging, Exact, Grouping, Judgment, PromptScore, ReportRow, ReportTable, ScoreError,
    Tally,
};
pub use stats::{average_ranks, correlations, kendall_tau_b, pearson, spearman, Correlations, StatsError};
