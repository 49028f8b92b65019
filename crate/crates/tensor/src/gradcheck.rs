//! Central finite-difference checks for recorded gradients.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it is used to check.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Below this magnitude a gradient is compared absolutely rather than
/// relatively, so exact zeros on both sides count as agreement.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        !self.probes.is_empty() && self.probes.iter().all(|p| p.rel_err < tolerance)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares `backward` against central differences for every coordinate of
/// every input. `build` must produce a single-element loss and must be a
/// pure function of its inputs.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[which].shape());
        let analytic = grads.wrt(*var).unwrap_or(&zeros).clone();
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            report.probes.push(Probe {
                label: format!("input{which}[{i}]"),
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    Ok(report)
}

/// Picks `count` (parameter, flat index) coordinates, cycling through the
/// trainable entries so that every entry is probed once before any twice.
pub fn sample_coordinates(store: &ParamStore, count: usize, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
    let trainable: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    if trainable.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|k| {
            let id = trainable[k % trainable.len()];
            (id, rng.random_range(0..store.get(id).numel()))
        })
        .collect()
}

/// Compares analytic parameter gradients against central differences of
/// `loss` at the chosen coordinates. The store is restored afterwards.
pub fn check_params<L>(
    store: &mut ParamStore,
    analytic: &ParamGrads,
    coords: &[(ParamId, usize)],
    step: f64,
    mut loss: L,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    for &(id, i) in coords {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + step;
        let plus = loss(store);
        store.get_mut(id).data_mut()[i] = orig - step;
        let minus = loss(store);
        store.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * step);
        let a = analytic.get(id).data()[i];
        report.probes.push(Probe {
            label: format!("{}[{i}]", store.name(id)),
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
    }
    Ok(report)
}

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Values at least `gap` away from zero, so kinks stay out of the stencil.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Distinct values spaced `gap` apart in random order, so max selections
/// cannot flip under a small perturbation.
fn distinct(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).expect("shape matches data")
}

/// `Σ w ⊙ v` with fixed weights, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i as f64) * 0.731 + 0.3).sin()).collect())?;
    let w = tape.constant(w);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

/// Checks every differentiable tape primitive on small random inputs and
/// returns one named report per primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tape::{Mode, NormStats};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DEFAULT_STEP;
    let mut out = Vec::new();
    let mut run = |name: &'static str, report: GradCheckReport| out.push((name, report));

    let ab = [uniform(&[3, 4], &mut rng), uniform(&[4, 2], &mut rng)];
    run("matmul", check_inputs(&ab, h, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y)
    })?);
    let ab = [uniform(&[3, 4], &mut rng), uniform(&[3, 4], &mut rng)];
    run("add", check_inputs(&ab, h, |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y)
    })?);
    run("sub", check_inputs(&ab, h, |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y)
    })?);
    run("mul", check_inputs(&ab, h, |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y)
    })?);
    let xb = [uniform(&[3, 4], &mut rng), uniform(&[4], &mut rng)];
    run("add_bias", check_inputs(&xb, h, |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        weighted_sum(t, y)
    })?);
    let xwb = [uniform(&[3, 4], &mut rng), uniform(&[4, 2], &mut rng), uniform(&[2], &mut rng)];
    run("linear", check_inputs(&xwb, h, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(t, y)
    })?);
    let x = [uniform(&[3, 4], &mut rng)];
    run("scale", check_inputs(&x, h, |t, v| {
        let y = t.scale(v[0], -1.7);
        weighted_sum(t, y)
    })?);
    let xs = [uniform(&[3, 4], &mut rng), uniform(&[1], &mut rng)];
    run("mul_scalar", check_inputs(&xs, h, |t, v| {
        let y = t.mul_scalar(v[0], v[1])?;
        weighted_sum(t, y)
    })?);
    let x = [away_from_zero(&[3, 4], 0.05, &mut rng)];
    run("abs", check_inputs(&x, h, |t, v| {
        let y = t.abs(v[0]);
        weighted_sum(t, y)
    })?);
    run("leaky_relu", check_inputs(&x, h, |t, v| {
        let y = t.leaky_relu(v[0], crate::LEAKY_SLOPE);
        weighted_sum(t, y)
    })?);
    let pos = [uniform(&[3, 4], &mut rng).map(|v| v.abs() + 0.5)];
    run("log", check_inputs(&pos, h, |t, v| {
        let y = t.log(v[0])?;
        weighted_sum(t, y)
    })?);
    let x = [uniform(&[3, 4], &mut rng)];
    run("exp", check_inputs(&x, h, |t, v| {
        let y = t.exp(v[0]);
        weighted_sum(t, y)
    })?);
    let ab = [uniform(&[3, 2], &mut rng), uniform(&[3, 3], &mut rng)];
    run("concat_cols", check_inputs(&ab, h, |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        weighted_sum(t, y)
    })?);
    let x = [uniform(&[3, 5], &mut rng)];
    run("slice_cols", check_inputs(&x, h, |t, v| {
        let y = t.slice_cols(v[0], 1, 4)?;
        weighted_sum(t, y)
    })?);
    run("sum", check_inputs(&x, h, |t, v| {
        let y = t.exp(v[0]);
        Ok(t.sum(y))
    })?);
    run("mean", check_inputs(&x, h, |t, v| {
        let y = t.exp(v[0]);
        Ok(t.mean(y))
    })?);
    run("softmax_rows", check_inputs(&x, h, |t, v| {
        let y = t.softmax_rows(v[0])?;
        weighted_sum(t, y)
    })?);
    let keep: Vec<bool> = (0..15).map(|i| i % 5 != 1 && i % 5 != 4).collect();
    run("softmax_rows_masked", check_inputs(&x, h, |t, v| {
        let y = t.softmax_rows_masked(v[0], Some(&keep))?;
        weighted_sum(t, y)
    })?);
    run("log_softmax_rows", check_inputs(&x, h, |t, v| {
        let y = t.log_softmax_rows(v[0])?;
        weighted_sum(t, y)
    })?);
    let xk = [uniform(&[2, 2, 4, 4], &mut rng), uniform(&[3, 2, 3, 3], &mut rng)];
    run("conv2d", check_inputs(&xk, h, |t, v| {
        let y = t.conv2d(v[0], v[1])?;
        weighted_sum(t, y)
    })?);
    let x = [distinct(&[2, 2, 4, 5], 0.01, &mut rng)];
    run("maxpool2", check_inputs(&x, h, |t, v| {
        let y = t.maxpool2(v[0])?;
        weighted_sum(t, y)
    })?);
    let xgb = [uniform(&[3, 2, 2, 2], &mut rng), uniform(&[2], &mut rng), uniform(&[2], &mut rng)];
    run("batchnorm_batch", check_inputs(&xgb, h, |t, v| {
        let (y, _) = t.batchnorm(v[0], v[1], v[2], NormStats::Batch)?;
        weighted_sum(t, y)
    })?);
    run("batchnorm_running", check_inputs(&xgb, h, |t, v| {
        let stats = NormStats::Running { mean: &[0.1, -0.2], var: &[0.7, 1.3] };
        let (y, _) = t.batchnorm(v[0], v[1], v[2], stats)?;
        weighted_sum(t, y)
    })?);
    let x = [uniform(&[4, 5], &mut rng)];
    run("dropout", check_inputs(&x, h, |t, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
        let y = t.dropout(v[0], 0.5, Mode::Train, &mut mask_rng)?;
        weighted_sum(t, y)
    })?);
    run("reshape", check_inputs(&x, h, |t, v| {
        let y = t.reshape(v[0], &[2, 10])?;
        let y = t.exp(y);
        weighted_sum(t, y)
    })?);
    run("gather_rows", check_inputs(&x, h, |t, v| {
        let y = t.gather_rows(v[0], &[3, 0, 3])?;
        weighted_sum(t, y)
    })?);
    run("scatter_rows", check_inputs(&x, h, |t, v| {
        let y = t.scatter_rows(v[0], &[5, 1, 2, 0], 7)?;
        weighted_sum(t, y)
    })?);
    run("element", check_inputs(&x, h, |t, v| {
        let y = t.element(v[0], 7)?;
        let z = t.exp(y);
        t.element(z, 0)
    })?);
    let x = [distinct(&[4, 3], 0.07, &mut rng)];
    run("pairwise_abs_diff", check_inputs(&x, h, |t, v| {
        let y = t.pairwise_abs_diff(v[0])?;
        weighted_sum(t, y)
    })?);
    let p = [uniform(&[10, 2], &mut rng)];
    run("sym_from_pairs", check_inputs(&p, h, |t, v| {
        let col = t.slice_cols(v[0], 0, 1)?;
        let y = t.sym_from_pairs(col, 4)?;
        weighted_sum(t, y)
    })?);
    run("pairwise_dist", check_inputs(&x, h, |t, v| {
        let y = t.pairwise_dist(v[0])?;
        weighted_sum(t, y)
    })?);
    Ok(out)
}
