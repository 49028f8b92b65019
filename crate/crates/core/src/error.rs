use std::path::PathBuf;

use graphshot_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("episode sampling: {0}")]
    Sampling(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("ingestion failed for {} path(s): {}", .0.len(), format_failures(.0))]
    Ingest(Vec<(PathBuf, String)>),
    #[error("dataset cache: {0}")]
    Cache(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; offending episode seed {episode_seed}")]
    NonFiniteLoss { step: usize, episode_seed: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_failures(failures: &[(PathBuf, String)]) -> String {
    failures
        .iter()
        .map(|(p, why)| format!("{} ({why})", p.display()))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
