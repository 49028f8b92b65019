//! Training, evaluation, run artifacts and report tables.

pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod tables;
pub mod train;

use std::path::Path;

pub use config::{DatasetKind, TaskKind, TrainConfig};
pub use data::{load_datasets, Datasets};
pub use eval::{evaluate_split, half_width, EvalOutcome, EvalReport, Protocol};
pub use tables::emit_tables;
pub use train::{episode_loss, train, train_on, MetricRow, TrainOutcome, Trainer};

use crate::checkpoint;
use crate::error::Result;
use crate::model::Model;

/// Loads a checkpoint into a model built from `cfg` and evaluates it on
/// `episodes` test episodes.
pub fn evaluate(checkpoint_path: &Path, cfg: &TrainConfig, episodes: usize) -> Result<EvalReport> {
    let data = load_datasets(cfg)?;
    let mut model = Model::new(cfg.model_config(data.test.image_shape()), cfg.seed)?;
    checkpoint::load(&mut model.store, checkpoint_path)?;
    evaluate_model(&model, &data, cfg, episodes)
}

/// Test-split evaluation of an in-memory model.
pub fn evaluate_model(model: &Model, data: &Datasets, cfg: &TrainConfig, episodes: usize) -> Result<EvalReport> {
    let protocol = Protocol::from_config(cfg)?;
    let outcome = evaluate_split(model, &data.test, &protocol, episodes, cfg.seed ^ train::TEST_STREAM)?;
    Ok(EvalReport::new(cfg, &outcome))
}
