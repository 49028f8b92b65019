//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::active::QueryPolicy;
use crate::embedding::EmbeddingKind;
use crate::episodes::{EpisodeMode, EpisodeSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::gnn::{DEFAULT_BLOCKS, DEFAULT_NF};
use crate::model::{ModelConfig, ModelKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Omniglot,
    MiniImagenet,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Omniglot => "omniglot",
            DatasetKind::MiniImagenet => "mini-imagenet",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "omniglot" => Ok(DatasetKind::Omniglot),
            "mini-imagenet" => Ok(DatasetKind::MiniImagenet),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

/// Episode construction used for training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Class-balanced episodes from `sample_episode`.
    Standard,
    /// Constructed active-learning tasks with one informative unlabeled
    /// image, from `sample_informative_episode`.
    Informative,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Standard => "standard",
            TaskKind::Informative => "informative",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(TaskKind::Standard),
            "informative" => Ok(TaskKind::Informative),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: EpisodeMode,
    pub task: TaskKind,
    pub way: usize,
    /// Images per class before the labeled fraction is applied.
    pub shots: usize,
    pub labeled_fraction: f64,
    /// Unlabeled images in an informative task.
    pub unlabeled: usize,
    pub episodes_per_step: usize,
    pub steps: usize,
    pub lr: f64,
    /// Halve the learning rate every this many steps; 0 keeps it fixed.
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub val_episodes: usize,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub synth_train_classes: usize,
    pub synth_val_classes: usize,
    pub synth_test_classes: usize,
    pub synth_dim: usize,
    pub synth_sep: f64,
    pub synth_latent_dim: Option<usize>,
    pub synth_images_per_class: usize,
    pub synth_noise: f64,
    pub model: ModelKind,
    pub embedding: Option<EmbeddingKind>,
    pub query_policy: QueryPolicy,
    pub nf: usize,
    pub blocks: usize,
    pub adj_mask_self: bool,
    pub knn_hard: bool,
    /// Checkpoint whose blocks replace the fresh initialization of the
    /// parameters they name; the rest keep their initial values.
    pub init_from: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: EpisodeMode::FewShot,
            task: TaskKind::Standard,
            way: 5,
            shots: 1,
            labeled_fraction: 1.0,
            unlabeled: 4,
            episodes_per_step: 16,
            steps: 1000,
            lr: 1e-3,
            lr_decay_every: 0,
            weight_decay: 0.0,
            seed: 0,
            eval_every: 100,
            val_episodes: 200,
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            data_seed: 0,
            synth_train_classes: 50,
            synth_val_classes: 10,
            synth_test_classes: 20,
            synth_dim: 64,
            synth_sep: 6.0,
            synth_latent_dim: None,
            synth_images_per_class: 20,
            synth_noise: 1.0,
            model: ModelKind::Gnn,
            embedding: None,
            query_policy: QueryPolicy::Learned,
            nf: DEFAULT_NF,
            blocks: DEFAULT_BLOCKS,
            adj_mask_self: false,
            knn_hard: false,
            init_from: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl TrainConfig {
    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    /// Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let opt = |v: &str| (v != "auto" && !v.is_empty()).then(|| v.to_string());
        match key {
            "mode" => self.mode = v.parse()?,
            "task" => self.task = v.parse()?,
            "way" => self.way = parse(key, v)?,
            "shots" => self.shots = parse(key, v)?,
            "labeled_fraction" => self.labeled_fraction = parse(key, v)?,
            "unlabeled" => self.unlabeled = parse(key, v)?,
            "episodes_per_step" => self.episodes_per_step = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "val_episodes" => self.val_episodes = parse(key, v)?,
            "dataset" => self.dataset = v.parse()?,
            "data_dir" => self.data_dir = opt(v).map(PathBuf::from),
            "data_seed" => self.data_seed = parse(key, v)?,
            "synth_train_classes" => self.synth_train_classes = parse(key, v)?,
            "synth_val_classes" => self.synth_val_classes = parse(key, v)?,
            "synth_test_classes" => self.synth_test_classes = parse(key, v)?,
            "synth_dim" => self.synth_dim = parse(key, v)?,
            "synth_sep" => self.synth_sep = parse(key, v)?,
            "synth_latent_dim" => self.synth_latent_dim = opt(v).map(|s| parse(key, &s)).transpose()?,
            "synth_images_per_class" => self.synth_images_per_class = parse(key, v)?,
            "synth_noise" => self.synth_noise = parse(key, v)?,
            "model" => self.model = v.parse()?,
            "embedding" => self.embedding = opt(v).map(|s| s.parse()).transpose()?,
            "query_policy" => self.query_policy = v.parse()?,
            "nf" => self.nf = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "adj_mask_self" => self.adj_mask_self = parse(key, v)?,
            "knn_hard" => self.knn_hard = parse(key, v)?,
            "init_from" => self.init_from = opt(v).map(PathBuf::from),
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every field in declaration order, as written by [`Self::to_text`].
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let auto = |o: Option<String>| o.unwrap_or_else(|| "auto".into());
        vec![
            ("mode", self.mode.to_string()),
            ("task", self.task.to_string()),
            ("way", self.way.to_string()),
            ("shots", self.shots.to_string()),
            ("labeled_fraction", self.labeled_fraction.to_string()),
            ("unlabeled", self.unlabeled.to_string()),
            ("episodes_per_step", self.episodes_per_step.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("val_episodes", self.val_episodes.to_string()),
            ("dataset", self.dataset.to_string()),
            ("data_dir", auto(self.data_dir.as_ref().map(|p| p.display().to_string()))),
            ("data_seed", self.data_seed.to_string()),
            ("synth_train_classes", self.synth_train_classes.to_string()),
            ("synth_val_classes", self.synth_val_classes.to_string()),
            ("synth_test_classes", self.synth_test_classes.to_string()),
            ("synth_dim", self.synth_dim.to_string()),
            ("synth_sep", self.synth_sep.to_string()),
            ("synth_latent_dim", auto(self.synth_latent_dim.map(|v| v.to_string()))),
            ("synth_images_per_class", self.synth_images_per_class.to_string()),
            ("synth_noise", self.synth_noise.to_string()),
            ("model", self.model.to_string()),
            ("embedding", auto(self.embedding.map(|e| e.to_string()))),
            ("query_policy", self.query_policy.to_string()),
            ("nf", self.nf.to_string()),
            ("blocks", self.blocks.to_string()),
            ("adj_mask_self", self.adj_mask_self.to_string()),
            ("knn_hard", self.knn_hard.to_string()),
            ("init_from", auto(self.init_from.as_ref().map(|p| p.display().to_string()))),
            ("output_dir", self.output_dir.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the settings that determine
    /// results (everything except the output directory).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            if k != "output_dir" {
                h.update(format!("{k} = {v}\n"));
            }
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.way < 2 {
            return bad(format!("way must be at least 2, got {}", self.way));
        }
        if self.episodes_per_step == 0 {
            return bad("episodes_per_step must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if self.task == TaskKind::Informative && self.mode != EpisodeMode::Active {
            return bad("the informative task is an active-mode protocol".into());
        }
        if self.task == TaskKind::Informative && self.unlabeled == 0 {
            return bad("the informative task needs unlabeled > 0".into());
        }
        if self.mode == EpisodeMode::Active && self.model != ModelKind::Gnn {
            return bad(format!("active mode needs model = gnn, got {}", self.model));
        }
        if self.dataset != DatasetKind::Synthetic && self.data_dir.is_none() {
            return bad(format!("dataset {} needs data_dir", self.dataset));
        }
        if self.task == TaskKind::Standard {
            self.episode_spec()?;
        }
        Ok(())
    }

    /// Protocol for standard tasks.
    pub fn episode_spec(&self) -> Result<EpisodeSpec> {
        EpisodeSpec::partially_labeled(self.way, self.shots, self.labeled_fraction, self.mode)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let mut s = SynthSpec::new(0, self.synth_dim, self.synth_sep);
        if let Some(l) = self.synth_latent_dim {
            s.latent_dim = l;
        }
        s.images_per_class = self.synth_images_per_class;
        s.noise = self.synth_noise;
        s
    }

    pub fn embedding_kind(&self) -> EmbeddingKind {
        self.embedding.unwrap_or(match self.dataset {
            DatasetKind::Synthetic => EmbeddingKind::Vector,
            DatasetKind::Omniglot => EmbeddingKind::Omniglot,
            DatasetKind::MiniImagenet => EmbeddingKind::MiniImagenet,
        })
    }

    pub fn model_config(&self, input_shape: [usize; 3]) -> ModelConfig {
        ModelConfig {
            nf: self.nf,
            blocks: self.blocks,
            adj_mask_self: self.adj_mask_self,
            active: self.mode == EpisodeMode::Active,
            query_policy: self.query_policy,
            knn_hard: self.knn_hard,
            ..ModelConfig::new(self.model, self.embedding_kind(), input_shape, self.way)
        }
    }
}
