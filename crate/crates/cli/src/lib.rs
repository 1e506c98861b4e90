//! Config loading and stage orchestration behind the `prunenet` binary.

use std::path::PathBuf;

pub mod config;
pub mod pipeline;

pub use config::{DataPaths, PipelineConfig, ReviewMode};
pub use pipeline::{worker_threads, Pipeline, RunOptions, Stage};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("missing {}: run `prunenet {command}` before `prunenet {needed_by}`", artifact.display())]
    MissingArtifact {
        artifact: PathBuf,
        command: &'static str,
        needed_by: &'static str,
    },
    #[error(transparent)]
    Dataset(#[from] prunenet::dataset::DatasetError),
    #[error(transparent)]
    Training(#[from] prunenet::training::TrainingError),
    #[error(transparent)]
    Pruning(#[from] prunenet::pruning::PruningError),
    #[error(transparent)]
    Report(#[from] prunenet::report::ReportError),
    #[error(transparent)]
    Review(#[from] prunenet_review::ReviewError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl PipelineError {
    /// 1 for usage and configuration problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }
}
