//! Episodic training.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use graphshot_tensor::{Adam, Mode, ParamGrads, Tape, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{TaskKind, TrainConfig};
use super::data::{load_datasets, Datasets};
use super::eval::{evaluate_split, Protocol};
use crate::checkpoint;
use crate::episodes::{sample_episode, sample_informative_episode, DatasetSplit, Episode, EpisodeInput};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::apply_bn_updates;

/// Largest tolerated `|logsumexp(log_probs)|` for a model output.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Stream offsets so that training, validation and test draws never share
/// a generator seed.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;
pub(crate) const VAL_STREAM: u64 = 0x7661_6c00_0000_0000;
pub(crate) const TEST_STREAM: u64 = 0x7465_7374_0000_0000;

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `−log P(answer)` at the query node. The model output must be a
/// normalized log-probability row.
pub fn episode_loss(tape: &mut Tape, log_probs: Var, answer: usize) -> Result<Var> {
    let lp = tape.value(log_probs).data();
    if answer >= lp.len() {
        return Err(Error::Protocol(format!("answer {answer} outside 0..{}", lp.len())));
    }
    let lse = log_sum_exp(lp);
    if !(lse.abs() <= NORMALIZATION_TOL) {
        return Err(TensorError::Contract(format!("model output is not normalized: logsumexp = {lse}")).into());
    }
    let picked = tape.element(log_probs, answer)?;
    Ok(tape.scale(picked, -1.0))
}

/// Draws one training or evaluation episode for `protocol`.
pub fn draw_episode(split: &DatasetSplit, protocol: &Protocol, rng: &mut impl Rng) -> Result<Episode> {
    match protocol.task {
        TaskKind::Standard => sample_episode(split, &protocol.spec, rng),
        TaskKind::Informative => sample_informative_episode(split, protocol.spec.way, protocol.unlabeled, rng),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Mean episode loss plus the weight-decay term, if any.
    pub loss: f64,
    pub correct: usize,
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub weight_decay: f64,
}

impl Trainer {
    pub fn new(model: Model, lr: f64, lr_decay_every: usize, weight_decay: f64) -> Self {
        let adam = Adam::new(&model.store, lr, lr_decay_every);
        Self { model, adam, weight_decay }
    }

    /// One update from the mean gradient over `batch`. Each entry carries
    /// the seed of its forward-pass generator (dropout, query draws) and is
    /// identified by it if the loss turns non-finite.
    pub fn step(&mut self, batch: &[(EpisodeInput, u64)]) -> Result<StepStats> {
        let store = &self.model.store;
        let step = self.adam.steps_taken() + 1;
        let mut grads = ParamGrads::zeros_like(store);
        let mut bn_updates = Vec::new();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (input, seed) in batch {
            let mut fwd = match self.model.net.forward(store, input, Mode::Train, ChaCha8Rng::seed_from_u64(*seed)) {
                Err(Error::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(Error::NonFiniteLoss { step, episode_seed: *seed })
                }
                other => other?,
            };
            correct += usize::from(fwd.prediction() == input.answer);
            let lp = fwd.trace.log_probs;
            let loss = match episode_loss(&mut fwd.ctx.tape, lp, input.answer) {
                Err(Error::Tensor(TensorError::Contract(_) | TensorError::NonFinite { .. })) => {
                    return Err(Error::NonFiniteLoss { step, episode_seed: *seed })
                }
                other => other?,
            };
            let value = fwd.ctx.tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, episode_seed: *seed });
            }
            loss_sum += value;
            let g = fwd.ctx.tape.backward(loss)?;
            grads.accumulate(&g.to_param_grads(store));
            bn_updates.extend(fwd.ctx.bn_updates);
        }
        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        let mut loss = loss_sum / n;
        if self.weight_decay > 0.0 {
            loss += self.weight_decay * store.squared_norm();
            for id in store.ids().filter(|&id| store.is_trainable(id)) {
                let p = store.get(id).data();
                for (g, v) in grads.get_mut(id).data_mut().iter_mut().zip(p) {
                    *g += 2.0 * self.weight_decay * v;
                }
            }
        }
        if !grads.is_finite() {
            let seed = batch.first().map_or(0, |b| b.1);
            return Err(Error::NonFiniteLoss { step, episode_seed: seed });
        }
        self.adam.step(&mut self.model.store, &grads);
        apply_bn_updates(&mut self.model.store, &bn_updates);
        Ok(StepStats { loss, correct })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: [&str; 4] = ["step", "train-loss", "val-accuracy", "wall-seconds"];

pub struct TrainOutcome {
    /// Parameters of the best validation checkpoint.
    pub model: Model,
    pub best_step: usize,
    pub best_val_accuracy: f64,
    pub metrics: Vec<MetricRow>,
    pub datasets: Datasets,
    pub run_dir: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

fn write_manifest(cfg: &TrainConfig, data: &Datasets, dir: &Path) -> Result<()> {
    let config: serde_json::Map<String, serde_json::Value> =
        cfg.pairs().into_iter().map(|(k, v)| (k.to_string(), v.into())).collect();
    let datasets: serde_json::Map<String, serde_json::Value> =
        data.fingerprints.iter().map(|(s, h)| (s.to_string(), h.clone().into())).collect();
    let manifest = serde_json::json!({
        "config": config,
        "config_hash": cfg.hash(),
        "dataset_blob_sha1": datasets,
        "image_shape": data.train.image_shape(),
        "classes": {
            "train": data.train.class_count(),
            "val": data.val.class_count(),
            "test": data.test.class_count(),
        },
    });
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reads back the configuration echoed in a run manifest.
pub fn config_from_manifest(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let obj = v
        .get("config")
        .and_then(|c| c.as_object())
        .ok_or_else(|| Error::Config(format!("{} has no config object", path.display())))?;
    let mut cfg = TrainConfig::default();
    for (k, val) in obj {
        let s = val.as_str().ok_or_else(|| Error::Config(format!("config value {k} is not a string")))?;
        cfg.set(k, s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains from scratch as configured, writing the metrics log, manifest
/// and checkpoints under `cfg.output_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_datasets(cfg)?;
    train_on(cfg, data)
}

/// As [`train`] with datasets supplied by the caller.
pub fn train_on(cfg: &TrainConfig, data: Datasets) -> Result<TrainOutcome> {
    let started = Instant::now();
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    write_manifest(cfg, &data, &dir)?;
    let protocol = Protocol::from_config(cfg)?;
    let mut model = Model::new(cfg.model_config(data.train.image_shape()), cfg.seed)?;
    if let Some(init) = &cfg.init_from {
        let n = checkpoint::load_subset(&mut model.store, init)?;
        log::info!("initialized {n} of {} parameter blocks from {}", model.store.len(), init.display());
    }
    let mut trainer = Trainer::new(model, cfg.lr, cfg.lr_decay_every, cfg.weight_decay);

    let mut metrics_out = csv::Writer::from_path(dir.join(METRICS_FILE))?;
    metrics_out.write_record(METRICS_HEADER)?;
    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut stream = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM);
    let mut window_loss = 0.0;
    let mut window_steps = 0usize;
    let eval_every = if cfg.eval_every == 0 { cfg.steps.max(1) } else { cfg.eval_every };

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.episodes_per_step);
        for _ in 0..cfg.episodes_per_step {
            let seed: u64 = stream.random();
            let mut erng = ChaCha8Rng::seed_from_u64(seed);
            let episode = draw_episode(&data.train, &protocol, &mut erng)?;
            batch.push((episode.to_input(&data.train)?, seed));
        }
        let stats = match trainer.step(&batch) {
            Err(Error::NonFiniteLoss { step, episode_seed }) => {
                log::error!("non-finite loss at step {step}; replay with episode seed {episode_seed}");
                let dump = format!("step = {step}\nepisode_seed = {episode_seed}\n");
                fs::write(dir.join("nonfinite.txt"), dump)?;
                return Err(Error::NonFiniteLoss { step, episode_seed });
            }
            other => other?,
        };
        window_loss += stats.loss;
        window_steps += 1;
        if step % eval_every == 0 || step == cfg.steps {
            let val = evaluate_split(&trainer.model, &data.val, &protocol, cfg.val_episodes, cfg.seed ^ VAL_STREAM)?;
            let row = MetricRow {
                step,
                train_loss: window_loss / window_steps as f64,
                val_accuracy: val.accuracy(),
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            log::info!(
                "step {step}: train-loss {:.4}, val-accuracy {:.4}",
                row.train_loss,
                row.val_accuracy
            );
            metrics_out.write_record([
                row.step.to_string(),
                row.train_loss.to_string(),
                row.val_accuracy.to_string(),
                format!("{:.3}", row.wall_seconds),
            ])?;
            metrics_out.flush()?;
            if best.is_none_or(|(_, acc)| row.val_accuracy > acc) {
                best = Some((step, row.val_accuracy));
                checkpoint::save(&trainer.model.store, &dir.join(BEST_CHECKPOINT))?;
            }
            metrics.push(row);
            window_loss = 0.0;
            window_steps = 0;
        }
    }
    checkpoint::save(&trainer.model.store, &dir.join(LAST_CHECKPOINT))?;
    let mut model = trainer.model;
    let (best_step, best_val_accuracy) = best.unwrap_or((0, f64::NAN));
    if best.is_some() {
        checkpoint::load(&mut model.store, &dir.join(BEST_CHECKPOINT))?;
    }
    Ok(TrainOutcome { model, best_step, best_val_accuracy, metrics, datasets: data, run_dir: dir })
}
