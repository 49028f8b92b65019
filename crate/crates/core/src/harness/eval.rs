//! Evaluation over freshly sampled episodes with 95% intervals.

use graphshot_tensor::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{TaskKind, TrainConfig};
use super::train::draw_episode;
use crate::episodes::{DatasetSplit, EpisodeMode, EpisodeSpec};
use crate::error::Result;
use crate::model::Model;

/// Episode protocol shared by training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Protocol {
    pub spec: EpisodeSpec,
    pub task: TaskKind,
    /// Unlabeled images of an informative task.
    pub unlabeled: usize,
}

impl Protocol {
    pub fn standard(spec: EpisodeSpec) -> Self {
        Self { spec, task: TaskKind::Standard, unlabeled: 0 }
    }

    pub fn informative(way: usize, unlabeled: usize) -> Self {
        let spec = EpisodeSpec { way, shots: 1, unlabeled_per_class: 0, mode: EpisodeMode::Active };
        Self { spec, task: TaskKind::Informative, unlabeled }
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.task {
            TaskKind::Standard => Self::standard(cfg.episode_spec()?),
            TaskKind::Informative => Self::informative(cfg.way, cfg.unlabeled),
        })
    }
}

/// Per-episode outcomes of an evaluation run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOutcome {
    pub correct: Vec<bool>,
    /// Whether the active query picked the informative image, for
    /// informative tasks.
    pub hits: Vec<bool>,
}

impl EvalOutcome {
    pub fn accuracy(&self) -> f64 {
        mean(&self.correct)
    }

    pub fn hit_rate(&self) -> Option<f64> {
        (!self.hits.is_empty()).then(|| mean(&self.hits))
    }

    pub fn half_width(&self) -> Option<f64> {
        half_width(&self.correct)
    }
}

fn mean(v: &[bool]) -> f64 {
    v.iter().filter(|&&b| b).count() as f64 / v.len().max(1) as f64
}

/// `1.96 · s / √n` with the sample standard deviation `s` of the 0/1
/// outcomes; undefined for fewer than two episodes.
pub fn half_width(outcomes: &[bool]) -> Option<f64> {
    let n = outcomes.len();
    if n < 2 {
        return None;
    }
    let m = mean(outcomes);
    let ss: f64 = outcomes.iter().map(|&b| (f64::from(u8::from(b)) - m).powi(2)).sum();
    Some(1.96 * (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt())
}

/// Runs `model` in eval mode on `episodes` episodes drawn from `split`.
/// Episode `i` uses a generator seeded from the `i`-th draw of `seed`.
pub fn evaluate_split(
    model: &Model,
    split: &DatasetSplit,
    protocol: &Protocol,
    episodes: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    let mut stream = ChaCha8Rng::seed_from_u64(seed);
    let mut out = EvalOutcome::default();
    for _ in 0..episodes {
        let mut erng = ChaCha8Rng::seed_from_u64(stream.random());
        let episode = draw_episode(split, protocol, &mut erng)?;
        let input = episode.to_input(split)?;
        let fwd = model.forward(&input, Mode::Eval, erng.random())?;
        out.correct.push(fwd.prediction() == input.answer);
        if let (Some(target), Some(pick)) = (episode.informative, fwd.pick) {
            out.hits.push(pick.position == target);
        }
    }
    Ok(out)
}

/// One evaluation summary, one table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub mode: String,
    pub policy: String,
    pub way: usize,
    pub shots: usize,
    pub labeled_fraction: f64,
    pub episodes: usize,
    pub accuracy: f64,
    /// `None` when fewer than two episodes were run.
    pub half_width: Option<f64>,
    pub query_hit_rate: Option<f64>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(cfg: &TrainConfig, outcome: &EvalOutcome) -> Self {
        Self {
            model: cfg.model.to_string(),
            mode: match cfg.task {
                TaskKind::Standard => cfg.mode.to_string(),
                TaskKind::Informative => format!("{}-{}", cfg.mode, cfg.task),
            },
            policy: if cfg.mode == EpisodeMode::Active { cfg.query_policy.to_string() } else { "-".into() },
            way: cfg.way,
            shots: cfg.shots,
            labeled_fraction: cfg.labeled_fraction,
            episodes: outcome.correct.len(),
            accuracy: outcome.accuracy(),
            half_width: outcome.half_width(),
            query_hit_rate: outcome.hit_rate(),
            config_hash: cfg.hash(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_width_formula() {
        assert_eq!(half_width(&[true]), None);
        assert_eq!(half_width(&[]), None);
        let v = [true, false, true, true];
        // mean 0.75, sample variance 0.25
        let expect = 1.96 * 0.5 / 2.0;
        assert!((half_width(&v).unwrap() - expect).abs() < 1e-15);
        assert_eq!(half_width(&[true; 10]), Some(0.0));
    }
}
