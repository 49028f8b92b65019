//! A complete episode classifier: embedding, graph network and optional
//! active query, with its parameters.

use std::fmt;
use std::str::FromStr;

use graphshot_tensor::{Mode, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::active::{active_query, Attention, QueryPick, QueryPolicy};
use crate::baselines::{metric_knn_scores, proto_scores, siamese_scores};
use crate::embedding::{init_nodes_from, Embedding, EmbeddingKind};
use crate::episodes::EpisodeInput;
use crate::error::{Error, Result};
use crate::gnn::{Gnn, GnnConfig, GnnTrace, KernelSource, DEFAULT_BLOCKS, DEFAULT_NF};
use crate::nn::Ctx;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Gnn,
    Siamese,
    Proto,
    MetricKnn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Gnn => "gnn",
            ModelKind::Siamese => "siamese",
            ModelKind::Proto => "proto",
            ModelKind::MetricKnn => "metric-knn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gnn" => Ok(ModelKind::Gnn),
            "siamese" => Ok(ModelKind::Siamese),
            "proto" => Ok(ModelKind::Proto),
            "metric-knn" => Ok(ModelKind::MetricKnn),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embedding: EmbeddingKind,
    pub input_shape: [usize; 3],
    pub way: usize,
    pub nf: usize,
    pub blocks: usize,
    pub adj_mask_self: bool,
    /// Attach the active-query scorer after the first GNN block.
    pub active: bool,
    pub query_policy: QueryPolicy,
    pub knn_hard: bool,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, embedding: EmbeddingKind, input_shape: [usize; 3], way: usize) -> Self {
        Self {
            kind,
            embedding,
            input_shape,
            way,
            nf: DEFAULT_NF,
            blocks: DEFAULT_BLOCKS,
            adj_mask_self: false,
            active: false,
            query_policy: QueryPolicy::Learned,
            knn_hard: false,
        }
    }
}

/// Architecture: which parameters feed which computation.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub embedding: Embedding,
    pub gnn: Gnn,
    pub attention: Option<Attention>,
}

/// Result of one forward pass; the context still holds the tape.
pub struct Forward<'s> {
    pub ctx: Ctx<'s>,
    pub embeddings: Var,
    pub trace: GnnTrace,
    pub pick: Option<QueryPick>,
}

impl Forward<'_> {
    pub fn log_probs(&self) -> &[f64] {
        self.ctx.tape.value(self.trace.log_probs).data()
    }

    /// Highest-scoring class, lowest index on ties.
    pub fn prediction(&self) -> usize {
        argmax(self.log_probs())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

impl Network {
    pub fn build(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        if config.way < 2 {
            return Err(Error::Config(format!("way must be at least 2, got {}", config.way)));
        }
        if config.active && config.kind != ModelKind::Gnn {
            return Err(Error::Config(format!("active query needs the gnn model, not {}", config.kind)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Embedding::new(store, config.embedding, config.input_shape, &mut rng)?;
        let e = embedding.out_width();
        let gnn = match config.kind {
            ModelKind::Gnn => {
                let cfg = GnnConfig {
                    nf: config.nf,
                    blocks: config.blocks,
                    adj_mask_self: config.adj_mask_self,
                    ..GnnConfig::new(e + config.way, config.way)
                };
                if cfg.blocks == 0 {
                    return Err(Error::Config("gnn needs at least one block".into()));
                }
                Gnn::learned(store, &cfg, &mut rng)
            }
            ModelKind::Siamese => Gnn::siamese(e, config.way),
            ModelKind::Proto => Gnn::proto(e, config.way),
            ModelKind::MetricKnn => Gnn::metric_knn(store, e + config.way, config.way, config.knn_hard, &mut rng),
        };
        let attention = config.active.then(|| Attention::new(store, gnn.widths()[1], &mut rng));
        Ok(Self { config, embedding, gnn, attention })
    }

    /// Full forward pass on `input` with parameters from `store`.
    pub fn forward<'s>(&self, store: &'s ParamStore, input: &EpisodeInput, mode: Mode, rng: ChaCha8Rng) -> Result<Forward<'s>> {
        if input.way != self.config.way {
            return Err(Error::Protocol(format!("{}-way episode for a {}-way model", input.way, self.config.way)));
        }
        let mut ctx = Ctx::new(store, mode, rng);
        let images = ctx.tape.constant(input.images.clone());
        let embeddings = self.embedding.forward(&mut ctx, images)?;
        let x0 = init_nodes_from(&mut ctx, embeddings, input)?;
        let mut pick = None;
        let trace = match (&self.attention, input.unlabeled.is_empty()) {
            (Some(att), false) => {
                let policy = self.config.query_policy;
                let mut hook = |ctx: &mut Ctx, x1: Var| -> Result<Var> {
                    let (x, p) = active_query(ctx, x1, &input.unlabeled, &input.unlabeled_labels, input.way, att, policy)?;
                    pick = Some(p);
                    Ok(x)
                };
                self.gnn.forward(&mut ctx, x0, &input.node_labels, Some(&mut hook))?
            }
            _ => self.gnn.forward(&mut ctx, x0, &input.node_labels, None)?,
        };
        Ok(Forward { ctx, embeddings, trace, pick })
    }

    /// The same prediction through the plain-loop baseline code, for the
    /// Siamese, prototypical and metric-KNN models on few-shot episodes.
    pub fn standalone_log_probs(&self, store: &ParamStore, input: &EpisodeInput, mode: Mode, rng: ChaCha8Rng) -> Result<Vec<f64>> {
        let mut ctx = Ctx::new(store, mode, rng);
        let images = ctx.tape.constant(input.images.clone());
        let emb = self.embedding.forward(&mut ctx, images)?;
        let labels = input.support_labels();
        let way = self.config.way;
        match self.config.kind {
            ModelKind::Siamese => siamese_scores(ctx.tape.value(emb), &labels, way),
            ModelKind::Proto => proto_scores(ctx.tape.value(emb), &labels, way),
            ModelKind::MetricKnn => {
                let KernelSource::Learned(metric) = &self.gnn.layers[0].kernel else {
                    unreachable!("metric-knn uses a learned kernel")
                };
                let x0 = init_nodes_from(&mut ctx, emb, input)?;
                let x0: Tensor = ctx.tape.value(x0).clone();
                metric_knn_scores(store, metric, &x0, &labels, way, self.config.knn_hard)
            }
            ModelKind::Gnn => Err(Error::Config("the gnn model has no standalone route".into())),
        }
    }
}

/// Network plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(config, &mut store, seed)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn forward(&self, input: &EpisodeInput, mode: Mode, seed: u64) -> Result<Forward<'_>> {
        self.net.forward(&self.store, input, mode, ChaCha8Rng::seed_from_u64(seed))
    }
}
