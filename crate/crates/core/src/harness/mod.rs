//! Experiment orchestration: staged, resumable runs over a run directory,
//! the evaluation metrics, and report emission.

mod config;
mod metrics;
mod pipeline;
mod report;

use thiserror::Error;

pub use config::{fraction_count, DatasetSpec, ExperimentConfig, Method, SpaceSpec, SplitFractions, ZooSpec};
pub use metrics::{
    jaccard, mean_off_diagonal, mean_std, ranking, ranking_metrics, rar, sign_test, speedup, subset_overlap,
    RankingMetrics, SignTest,
};
pub use pipeline::{
    run_all, CellStatus, DownstreamArch, DownstreamCell, Pipeline, PipelineOutcome, SelectionCell,
    SpaceSplit, Stage, StageMarker, StageOutcome, StageStatus, ABLATION_SAMPLERS,
};
pub use report::{
    aggregate_reports, evaluate_run, regenerate_reports, write_aggregate, write_report, AblationCell,
    AblationMatrix, AggregateRow, CellResult, Comparison, FullResult, MachineFingerprint, MethodSummary,
    MultiSeedReport, Overhead, RunReport,
};

use crate::approximator::ApproxError;
use crate::archspace::ArchError;
use crate::baselines::BaselineError;
use crate::encoder::EncoderError;
use crate::sampler::SamplerError;
use crate::zoo::ZooError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}
