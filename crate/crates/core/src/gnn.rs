//! Graph neural network over the nodes of an episode.
//!
//! Each layer builds a row-stochastic kernel from the current node
//! features, mixes features through it and optionally concatenates its
//! input (dense connection). The full model uses a learned metric kernel
//! with a graph convolution over `{Ã, I}`; the Siamese, prototypical and
//! metric-KNN baselines are the same machinery with frozen kernels,
//! plain propagation and a label-vote readout.

use std::ops::Range;

use graphshot_tensor::{ParamId, ParamStore, Tape, Tensor, Var, LEAKY_SLOPE};
use rand::Rng;

use crate::baselines::proto_adjacency;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, Mlp};

/// Offset added to every vote before taking the log.
pub const VOTE_FLOOR: f64 = 1e-12;

/// Log-probability of a class holding vote `p`: `log((p + ε) / (1 + Kε))`,
/// which stays normalized when the votes sum to one.
pub fn vote_log_prob(p: f64, way: usize) -> f64 {
    ((p + VOTE_FLOOR) / (1.0 + way as f64 * VOTE_FLOOR)).ln()
}

pub const DEFAULT_NF: usize = 96;
pub const DEFAULT_BLOCKS: usize = 3;
pub const METRIC_HIDDEN: [usize; 2] = [64, 32];

/// Pre-softmax similarity `MLP(|x_i − x_j|)` for every node pair. Each
/// unordered pair is evaluated once, so the result is exactly symmetric.
pub fn edge_metric(ctx: &mut Ctx, x: Var, metric: &Mlp) -> Result<Var> {
    let n = ctx.tape.shape(x)[0];
    if n < 2 {
        return Err(Error::Shape(format!("edge metric needs at least 2 nodes, got {n}")));
    }
    let pairs = ctx.tape.pairwise_abs_diff(x)?;
    let scores = metric.forward(ctx, pairs)?;
    Ok(ctx.tape.sym_from_pairs(scores, n)?)
}

/// Row softmax of a pre-softmax matrix, restricted to `keep` entries
/// (row-major `n×n`) when given.
pub fn normalize_kernel(tape: &mut Tape, pre: Var, keep: Option<&[bool]>) -> Result<Var> {
    Ok(tape.softmax_rows_masked(pre, keep)?)
}

/// `ρ(Ã·x·θ_Ã + x·θ_I)` with the leaky-ReLU ρ.
pub fn graph_conv(ctx: &mut Ctx, x: Var, adj: Var, theta_adj: ParamId, theta_id: ParamId) -> Result<Var> {
    let ta = ctx.param(theta_adj);
    let ti = ctx.param(theta_id);
    let mixed = ctx.tape.matmul(adj, x)?;
    let a = ctx.tape.matmul(mixed, ta)?;
    let i = ctx.tape.matmul(x, ti)?;
    let s = ctx.tape.add(a, i)?;
    Ok(ctx.tape.leaky_relu(s, LEAKY_SLOPE))
}

#[derive(Clone, Debug)]
pub enum KernelSource {
    /// `softmax(MLP(|x_i − x_j|))`.
    Learned(Mlp),
    /// `softmax(−‖x_i − x_j‖)` over the given feature columns.
    NegEuclidean { cols: Range<usize> },
    /// Within-class averaging of labeled nodes; identity rows elsewhere.
    ClassAverage,
}

/// Which kernel entries take part in each row's softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnMask {
    All,
    NoSelf,
    /// Only labeled nodes other than the row's own node.
    Support,
}

#[derive(Clone, Debug)]
pub enum Update {
    GraphConv { theta_adj: ParamId, theta_id: ParamId },
    /// `x ← Ã·x`.
    Propagate,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub kernel: KernelSource,
    pub mask: ColumnMask,
    pub update: Update,
    /// Concatenate the layer input after its output.
    pub dense: bool,
}

#[derive(Clone, Debug)]
pub enum Readout {
    /// Dense layer on the query row, then log-softmax.
    Dense(Linear),
    /// [`vote_log_prob`] of the query row's label field. With
    /// `hard`, `p` is replaced by the one-hot label of the support node
    /// holding the largest weight in the last kernel's query row.
    LabelVote { hard: bool },
}

/// Everything recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct GnnTrace {
    /// `[1, way]` log-probabilities at the query node.
    pub log_probs: Var,
    /// Pre-softmax matrix per layer; `None` for class-average kernels.
    pub pre_softmax: Vec<Option<Var>>,
    pub kernels: Vec<Var>,
    /// Node features: input, then the output of every layer.
    pub features: Vec<Var>,
}

/// Post-first-layer hook used by the active query.
pub type LayerHook<'h> = &'h mut dyn FnMut(&mut Ctx, Var) -> Result<Var>;

#[derive(Clone, Debug)]
pub struct Gnn {
    pub layers: Vec<Layer>,
    pub readout: Readout,
    pub way: usize,
    widths: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GnnConfig {
    pub in_width: usize,
    pub way: usize,
    pub nf: usize,
    pub blocks: usize,
    pub adj_mask_self: bool,
}

impl GnnConfig {
    pub fn new(in_width: usize, way: usize) -> Self {
        Self { in_width, way, nf: DEFAULT_NF, blocks: DEFAULT_BLOCKS, adj_mask_self: false }
    }
}

impl Gnn {
    /// The learned model: `blocks` layers of metric kernel + graph
    /// convolution with dense connections, then a dense readout.
    pub fn learned(store: &mut ParamStore, cfg: &GnnConfig, rng: &mut impl Rng) -> Self {
        let mut widths = vec![cfg.in_width];
        let mut layers = Vec::with_capacity(cfg.blocks);
        for k in 0..cfg.blocks {
            let d = *widths.last().expect("non-empty");
            let mut mw = vec![d];
            mw.extend(METRIC_HIDDEN);
            mw.push(1);
            let metric = Mlp::new(store, &format!("gnn.block{k}.metric"), &mw, rng);
            let theta_adj = store.add_uniform(&format!("gnn.block{k}.theta_adj"), &[d, cfg.nf], d, rng);
            let theta_id = store.add_uniform(&format!("gnn.block{k}.theta_id"), &[d, cfg.nf], d, rng);
            layers.push(Layer {
                kernel: KernelSource::Learned(metric),
                mask: if cfg.adj_mask_self { ColumnMask::NoSelf } else { ColumnMask::All },
                update: Update::GraphConv { theta_adj, theta_id },
                dense: true,
            });
            widths.push(d + cfg.nf);
        }
        let d = *widths.last().expect("non-empty");
        let readout = Readout::Dense(Linear::new(store, "gnn.readout", d, cfg.way, true, rng));
        Self { layers, readout, way: cfg.way, widths }
    }

    /// One propagation step with the negative-Euclidean kernel over the
    /// embedding columns and a label vote: the Siamese reduction.
    pub fn siamese(embed_width: usize, way: usize) -> Self {
        let d = embed_width + way;
        Self {
            layers: vec![Layer {
                kernel: KernelSource::NegEuclidean { cols: 0..embed_width },
                mask: ColumnMask::Support,
                update: Update::Propagate,
                dense: false,
            }],
            readout: Readout::LabelVote { hard: false },
            way,
            widths: vec![d, d],
        }
    }

    /// Class averaging followed by the Siamese step: the prototypical
    /// reduction.
    pub fn proto(embed_width: usize, way: usize) -> Self {
        let mut g = Self::siamese(embed_width, way);
        g.layers.insert(
            0,
            Layer { kernel: KernelSource::ClassAverage, mask: ColumnMask::All, update: Update::Propagate, dense: false },
        );
        g.widths.push(embed_width + way);
        g
    }

    /// Learned metric on `x⁽⁰⁾` between the query and each support node,
    /// then a label vote without any aggregation among support nodes.
    pub fn metric_knn(store: &mut ParamStore, in_width: usize, way: usize, hard: bool, rng: &mut impl Rng) -> Self {
        let mut mw = vec![in_width];
        mw.extend(METRIC_HIDDEN);
        mw.push(1);
        let metric = Mlp::new(store, "knn.metric", &mw, rng);
        Self {
            layers: vec![Layer {
                kernel: KernelSource::Learned(metric),
                mask: ColumnMask::Support,
                update: Update::Propagate,
                dense: false,
            }],
            readout: Readout::LabelVote { hard },
            way,
            widths: vec![in_width, in_width],
        }
    }

    /// Node width entering each layer, then the final width.
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn keep_mask(mask: ColumnMask, node_labels: &[Option<usize>]) -> Option<Vec<bool>> {
        let n = node_labels.len();
        match mask {
            ColumnMask::All => None,
            ColumnMask::NoSelf => Some((0..n * n).map(|e| e / n != e % n).collect()),
            ColumnMask::Support => {
                Some((0..n * n).map(|e| e / n != e % n && node_labels[e % n].is_some()).collect())
            }
        }
    }

    fn kernel(&self, ctx: &mut Ctx, layer: &Layer, x: Var, node_labels: &[Option<usize>]) -> Result<(Option<Var>, Var)> {
        let pre = match &layer.kernel {
            KernelSource::Learned(metric) => edge_metric(ctx, x, metric)?,
            KernelSource::NegEuclidean { cols } => {
                let e = ctx.tape.slice_cols(x, cols.start, cols.end)?;
                let d = ctx.tape.pairwise_dist(e)?;
                ctx.tape.scale(d, -1.0)
            }
            KernelSource::ClassAverage => {
                let adj = proto_adjacency(node_labels)?;
                return Ok((None, ctx.tape.constant(adj)));
            }
        };
        let keep = Self::keep_mask(layer.mask, node_labels);
        let adj = normalize_kernel(&mut ctx.tape, pre, keep.as_deref())?;
        Ok((Some(pre), adj))
    }

    /// Runs every layer on `x0` (node order: labeled, unlabeled, query) and
    /// reads out the query node. `after_first` may rewrite the features
    /// produced by the first layer.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x0: Var,
        node_labels: &[Option<usize>],
        mut after_first: Option<LayerHook<'_>>,
    ) -> Result<GnnTrace> {
        let n = node_labels.len();
        let (rows, width) = ctx.tape.value(x0).dims2()?;
        if rows != n || width != self.widths[0] {
            return Err(Error::Shape(format!(
                "gnn expects [{n}, {}] node features, got [{rows}, {width}]",
                self.widths[0]
            )));
        }
        let mut features = vec![x0];
        let mut kernels = Vec::with_capacity(self.layers.len());
        let mut pre_softmax = Vec::with_capacity(self.layers.len());
        let mut x = x0;
        for (k, layer) in self.layers.iter().enumerate() {
            let (pre, adj) = self.kernel(ctx, layer, x, node_labels)?;
            let out = match layer.update {
                Update::GraphConv { theta_adj, theta_id } => graph_conv(ctx, x, adj, theta_adj, theta_id)?,
                Update::Propagate => ctx.tape.matmul(adj, x)?,
            };
            x = if layer.dense { ctx.tape.concat_cols(&[out, x])? } else { out };
            if k == 0 {
                if let Some(hook) = after_first.as_mut() {
                    x = hook(ctx, x)?;
                }
            }
            pre_softmax.push(pre);
            kernels.push(adj);
            features.push(x);
        }
        let query = ctx.tape.gather_rows(x, &[n - 1])?;
        let log_probs = match &self.readout {
            Readout::Dense(fc) => {
                let logits = fc.forward(ctx, query)?;
                ctx.tape.log_softmax_rows(logits)?
            }
            Readout::LabelVote { hard: false } => {
                let d = ctx.tape.shape(query)[1];
                let p = ctx.tape.slice_cols(query, d - self.way, d)?;
                let floor = ctx.tape.constant(Tensor::full(&[1, self.way], VOTE_FLOOR));
                let p = ctx.tape.add(p, floor)?;
                let lp = ctx.tape.log(p)?;
                let norm = ctx.tape.constant(Tensor::full(&[1, self.way], -(1.0 + self.way as f64 * VOTE_FLOOR).ln()));
                ctx.tape.add(lp, norm)?
            }
            Readout::LabelVote { hard: true } => {
                let adj = ctx.tape.value(*kernels.last().expect("at least one layer"));
                let row = adj.row(n - 1);
                let best = (0..n)
                    .filter(|&j| node_labels[j].is_some())
                    .fold(None, |acc: Option<usize>, j| match acc {
                        Some(b) if row[b] >= row[j] => Some(b),
                        _ => Some(j),
                    })
                    .ok_or_else(|| Error::Protocol("hard vote needs a labeled node".into()))?;
                let label = node_labels[best].expect("filtered to labeled nodes");
                let lp = (0..self.way).map(|k| vote_log_prob(if k == label { 1.0 } else { 0.0 }, self.way));
                ctx.tape.constant(Tensor::new(&[1, self.way], lp.collect())?)
            }
        };
        Ok(GnnTrace { log_probs, pre_softmax, kernels, features })
    }
}
