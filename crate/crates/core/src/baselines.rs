//! Siamese, prototypical and metric-KNN classifiers written directly on
//! embeddings with plain floating-point loops. They double as oracles for
//! the corresponding frozen-kernel presets of [`crate::gnn::Gnn`].

use graphshot_tensor::{ParamStore, Tensor, LEAKY_SLOPE};

use crate::error::{Error, Result};
use crate::gnn::vote_log_prob;
use crate::nn::Mlp;

/// Block averaging matrix over labeled nodes: entry `(i, j)` is `1/q` when
/// both are labeled with the same class, where every class present has
/// exactly `q` labeled nodes. Rows of unlabeled nodes are identity rows.
pub fn proto_adjacency(node_labels: &[Option<usize>]) -> Result<Tensor> {
    let n = node_labels.len();
    let classes = node_labels.iter().flatten().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in node_labels.iter().flatten() {
        counts[l] += 1;
    }
    let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if present.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Protocol(format!("unbalanced support labels: per-class counts {counts:?}")));
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        match node_labels[i] {
            Some(li) => {
                let inv = 1.0 / counts[li] as f64;
                for j in 0..n {
                    if node_labels[j] == Some(li) {
                        out[i * n + j] = inv;
                    }
                }
            }
            None => out[i * n + i] = 1.0,
        }
    }
    Ok(Tensor::new(&[n, n], out)?)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn vote(weights: &[f64], labels: &[usize], way: usize) -> Vec<f64> {
    let mut p = vec![0.0; way];
    for (&w, &l) in weights.iter().zip(labels) {
        p[l] += w;
    }
    p.into_iter().map(|v| vote_log_prob(v, way)).collect()
}

/// Checks a few-shot layout: `labels.len()` support rows then the query.
fn support_rows<'a>(emb: &'a Tensor, labels: &[usize], way: usize) -> Result<(Vec<&'a [f64]>, &'a [f64])> {
    let (n, _) = emb.dims2()?;
    if n != labels.len() + 1 {
        return Err(Error::Protocol(format!(
            "expected {} support rows and one query, got {n} rows; unlabeled nodes are not supported",
            labels.len()
        )));
    }
    if labels.is_empty() || labels.iter().any(|&l| l >= way) {
        return Err(Error::Protocol(format!("support labels must be non-empty and lie in 0..{way}")));
    }
    Ok(((0..n - 1).map(|i| emb.row(i)).collect(), emb.row(n - 1)))
}

/// Softmax over negative query-to-support distances, then a vote of the
/// support labels. Returns log-probabilities.
pub fn siamese_scores(emb: &Tensor, labels: &[usize], way: usize) -> Result<Vec<f64>> {
    let (support, query) = support_rows(emb, labels, way)?;
    let neg: Vec<f64> = support.iter().map(|s| -euclid(s, query)).collect();
    Ok(vote(&softmax(&neg), labels, way))
}

/// Per-class mean embeddings of a balanced support set.
pub fn prototypes(support: &[&[f64]], labels: &[usize], way: usize) -> Result<Vec<Vec<f64>>> {
    let d = support.first().map_or(0, |s| s.len());
    let mut sums = vec![vec![0.0; d]; way];
    let mut counts = vec![0usize; way];
    for (s, &l) in support.iter().zip(labels) {
        sums[l].iter_mut().zip(*s).for_each(|(a, b)| *a += b);
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c != counts[0]) || counts[0] == 0 {
        return Err(Error::Protocol(format!("unbalanced support labels: per-class counts {counts:?}")));
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect())
}

/// Softmax over negative query-to-prototype distances.
pub fn proto_scores(emb: &Tensor, labels: &[usize], way: usize) -> Result<Vec<f64>> {
    let (support, query) = support_rows(emb, labels, way)?;
    let protos = prototypes(&support, labels, way)?;
    let neg: Vec<f64> = protos.iter().map(|c| -euclid(c, query)).collect();
    Ok(vote(&softmax(&neg), &(0..way).collect::<Vec<_>>(), way))
}

/// Evaluates an [`Mlp`] on one input vector.
pub fn mlp_eval(store: &ParamStore, mlp: &Mlp, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for (i, layer) in mlp.layers.iter().enumerate() {
        if i > 0 {
            h.iter_mut().for_each(|v| *v = if *v >= 0.0 { *v } else { LEAKY_SLOPE * *v });
        }
        let w = store.get(layer.weight);
        let mut out = match layer.bias {
            Some(b) => store.get(b).data().to_vec(),
            None => vec![0.0; layer.fan_out],
        };
        for (k, hv) in h.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(w.row(k)) {
                *o += hv * wv;
            }
        }
        h = out;
    }
    h
}

/// Learned affinity `MLP(|x_q − x_j|)` from the query to each support
/// row of `x0`, softmax-normalized and used as a label vote. With `hard`,
/// the whole vote goes to the single highest-affinity support node.
pub fn metric_knn_scores(
    store: &ParamStore,
    metric: &Mlp,
    x0: &Tensor,
    labels: &[usize],
    way: usize,
    hard: bool,
) -> Result<Vec<f64>> {
    let (support, query) = support_rows(x0, labels, way)?;
    let aff: Vec<f64> = support
        .iter()
        .map(|s| {
            let diff: Vec<f64> = s.iter().zip(query).map(|(a, b)| (a - b).abs()).collect();
            mlp_eval(store, metric, &diff)[0]
        })
        .collect();
    let weights = if hard {
        let best = aff
            .iter()
            .enumerate()
            .fold(0, |b, (j, &v)| if v > aff[b] { j } else { b });
        (0..aff.len()).map(|j| if j == best { 1.0 } else { 0.0 }).collect()
    } else {
        softmax(&aff)
    };
    Ok(vote(&weights, labels, way))
}
