//! Active query: attend over the unlabeled nodes after the first GNN
//! layer, pick one, and add its true label scaled by the attention weight
//! onto that node's label field.

use std::fmt;
use std::str::FromStr;

use graphshot_tensor::{Mode, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Mlp};

pub const SCORER_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueryPolicy {
    /// Attention from the learned scorer; multinomial draw while training,
    /// argmax at evaluation.
    Learned,
    /// Uniform attention and a uniform draw in every mode.
    Random,
}

impl fmt::Display for QueryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryPolicy::Learned => "learned",
            QueryPolicy::Random => "random",
        })
    }
}

impl FromStr for QueryPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(QueryPolicy::Learned),
            "random" => Ok(QueryPolicy::Random),
            other => Err(Error::Config(format!("unknown query policy {other:?}"))),
        }
    }
}

/// Two-layer scorer `g: d₁ → 32 → 1`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub g: Mlp,
}

impl Attention {
    pub fn new(store: &mut ParamStore, width: usize, rng: &mut impl Rng) -> Self {
        Self { g: Mlp::new(store, "active.g", &[width, SCORER_HIDDEN, 1], rng) }
    }
}

/// `softmax(g(x₁[u]))` over the unlabeled rows `u`, as a `[1, r]` row.
pub fn score_unlabeled(ctx: &mut Ctx, x1: Var, unlabeled: &[usize], attention: &Attention) -> Result<Var> {
    if unlabeled.is_empty() {
        return Err(Error::Protocol("active query needs at least one unlabeled node".into()));
    }
    let rows = ctx.tape.gather_rows(x1, unlabeled)?;
    let scores = attention.g.forward(ctx, rows)?;
    let scores = ctx.tape.reshape(scores, &[1, unlabeled.len()])?;
    Ok(ctx.tape.softmax_rows(scores)?)
}

/// Index of the selected entry: a multinomial draw in train mode, the
/// first maximum in eval mode.
pub fn select_one(attention: &[f64], mode: Mode, rng: &mut impl Rng) -> usize {
    match mode {
        Mode::Eval => attention
            .iter()
            .enumerate()
            .fold(0, |best, (i, &a)| if a > attention[best] { i } else { best }),
        Mode::Train => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &a) in attention.iter().enumerate() {
                acc += a;
                if u < acc {
                    return i;
                }
            }
            // Rounding left the cumulative sum just below 1.
            attention.iter().rposition(|&a| a > 0.0).unwrap_or(0)
        }
    }
}

/// Adds `w · h(label)` onto the last `way` columns (the label field carried
/// by the dense connections) of row `node`. Every other entry is unchanged;
/// gradient reaches `w`.
pub fn inject_label(
    tape: &mut Tape,
    x1: Var,
    node: usize,
    unlabeled: &[usize],
    w: Var,
    label: usize,
    way: usize,
) -> Result<Var> {
    if !unlabeled.contains(&node) {
        return Err(Error::Protocol(format!("node {node} is not an unlabeled node")));
    }
    if label >= way {
        return Err(Error::Protocol(format!("label {label} outside 0..{way}")));
    }
    let (n, d) = tape.value(x1).dims2()?;
    let mut e = Tensor::zeros(&[n, d]);
    e.data_mut()[node * d + d - way + label] = 1.0;
    let e = tape.constant(e);
    let delta = tape.mul_scalar(e, w)?;
    Ok(tape.add(x1, delta)?)
}

/// Outcome of one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryPick {
    /// Position within the unlabeled set.
    pub position: usize,
    pub node: usize,
    pub weight: f64,
}

/// Runs the query on `x1` for the chosen policy.
pub fn active_query(
    ctx: &mut Ctx,
    x1: Var,
    unlabeled: &[usize],
    hidden_labels: &[usize],
    way: usize,
    attention: &Attention,
    policy: QueryPolicy,
) -> Result<(Var, QueryPick)> {
    if unlabeled.is_empty() {
        return Err(Error::Protocol("active query needs at least one unlabeled node".into()));
    }
    let r = unlabeled.len();
    let (position, w) = match policy {
        QueryPolicy::Learned => {
            let att = score_unlabeled(ctx, x1, unlabeled, attention)?;
            let probs = ctx.tape.value(att).data().to_vec();
            let mode = ctx.mode;
            let position = select_one(&probs, mode, &mut ctx.rng);
            (position, ctx.tape.element(att, position)?)
        }
        QueryPolicy::Random => {
            let position = ctx.rng.random_range(0..r);
            (position, ctx.tape.constant(Tensor::scalar(1.0 / r as f64)))
        }
    };
    let weight = ctx.tape.value(w).item();
    let node = unlabeled[position];
    let x = inject_label(&mut ctx.tape, x1, node, unlabeled, w, hidden_labels[position], way)?;
    Ok((x, QueryPick { position, node, weight }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn singleton_and_identical_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, 4, &mut rng);
        let mut ctx = Ctx::new(&store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let x = ctx.tape.constant(Tensor::new(&[4, 4], (0..16).map(|v| v as f64 * 0.1).collect()).unwrap());
        let a = score_unlabeled(&mut ctx, x, &[2], &att).unwrap();
        assert_eq!(ctx.tape.value(a).data(), &[1.0]);
        let same = ctx.tape.constant(Tensor::full(&[4, 4], 0.3));
        let a = score_unlabeled(&mut ctx, same, &[0, 1, 2], &att).unwrap();
        assert!(ctx.tape.value(a).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(matches!(score_unlabeled(&mut ctx, x, &[], &att), Err(Error::Protocol(_))));
    }

    #[test]
    fn argmax_selection_prefers_lowest_index_on_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_one(&[0.1, 0.9], Mode::Eval, &mut rng), 1);
        assert_eq!(select_one(&[0.4, 0.2, 0.4], Mode::Eval, &mut rng), 0);
    }

    #[test]
    fn multinomial_selection_is_reproducible() {
        let att = [0.2, 0.5, 0.3];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| select_one(&att, Mode::Train, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn injection_sums_onto_the_label_field() {
        let mut tape = Tape::new();
        let row = [9.0, 9.0, 0.2, 0.2, 0.2, 0.2, 0.2];
        let x = tape.constant(Tensor::new(&[3, 7], row.repeat(3)).unwrap());
        let w = tape.constant(Tensor::scalar(1.0));
        // 1-based label 2 is index 1.
        let y = inject_label(&mut tape, x, 1, &[1, 2], w, 1, 5).unwrap();
        assert_eq!(&tape.value(y).row(1)[2..], &[0.2, 1.2, 0.2, 0.2, 0.2]);
        assert_eq!(tape.value(y).row(0), tape.value(x).row(0));
        assert_eq!(tape.value(y).row(2), tape.value(x).row(2));
        let zero = tape.constant(Tensor::scalar(0.0));
        let y = inject_label(&mut tape, x, 2, &[1, 2], zero, 3, 5).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(matches!(inject_label(&mut tape, x, 0, &[1, 2], zero, 3, 5), Err(Error::Protocol(_))));
    }
}
