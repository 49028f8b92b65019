//! Finite-difference gradient checks of the primitives and of complete
//! models, as run by the `gradcheck` command.

use graphshot_tensor::gradcheck::{check_params, primitive_suite, GradCheckReport, DEFAULT_STEP};
use graphshot_tensor::{Mode, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::episode_loss;
use crate::active::QueryPolicy;
use crate::embedding::EmbeddingKind;
use crate::episodes::{sample_episode, synth_dataset, EpisodeInput, EpisodeSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind};

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Probed parameter coordinates per model check.
pub const MODEL_PROBES: usize = 40;

/// Difference step for the convolutional embeddings. Their first block has
/// tens of thousands of units feeding max-pool and leaky ReLU, and a step
/// of `1e-4` regularly moves one of them across a kink.
pub const CONV_STEP: f64 = 1e-5;

pub const MODULES: [&str; 5] = ["tensor", "embedding", "gnn", "active", "model"];

#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub name: String,
    pub report: GradCheckReport,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        self.report.passed(GRADCHECK_TOL)
    }
}

/// `count` coordinates over the trainable parameters whose names start
/// with one of `prefixes`, each tensor visited once before any twice.
pub fn coordinates(store: &ParamStore, prefixes: &[&str], count: usize, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| store.is_trainable(id) && prefixes.iter().any(|p| store.name(id).starts_with(p)))
        .collect();
    if ids.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|k| {
            let id = ids[k % ids.len()];
            (id, rng.random_range(0..store.get(id).numel()))
        })
        .collect()
}

/// Compares the parameter gradient of the episode loss against central
/// differences at `coords`. The forward generator is reseeded from `seed`
/// for every evaluation, so dropout masks and query draws stay fixed.
pub fn check_model(
    model: &mut Model,
    input: &EpisodeInput,
    mode: Mode,
    coords: &[(ParamId, usize)],
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let Model { net, store } = model;
    let analytic = {
        let mut fwd = net.forward(store, input, mode, ChaCha8Rng::seed_from_u64(seed))?;
        let lp = fwd.trace.log_probs;
        let loss = episode_loss(&mut fwd.ctx.tape, lp, input.answer)?;
        fwd.ctx.tape.backward(loss)?.to_param_grads(store)
    };
    let mut failure = None;
    let report = check_params(store, &analytic, coords, step, |s| {
        let value = (|| -> Result<f64> {
            let mut fwd = net.forward(s, input, mode, ChaCha8Rng::seed_from_u64(seed))?;
            let lp = fwd.trace.log_probs;
            let loss = episode_loss(&mut fwd.ctx.tape, lp, input.answer)?;
            Ok(fwd.ctx.tape.value(loss).item())
        })();
        Ok(value.unwrap_or_else(|e| {
            failure.get_or_insert(e);
            f64::NAN
        }))
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// A 2-way 1-shot episode of a synthetic vector dataset.
pub fn synthetic_episode(dim: usize, seed: u64) -> Result<EpisodeInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = synth_dataset(&SynthSpec::new(4, dim, 3.0), &mut rng)?;
    sample_episode(&split, &EpisodeSpec::few_shot(2, 1), &mut rng)?.to_input(&split)
}

/// Uniform random images, one per entry of `node_labels`.
fn random_image_episode(shape: [usize; 3], way: usize, node_labels: Vec<Option<usize>>, hidden: Vec<usize>, seed: u64) -> Result<EpisodeInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = node_labels.len();
    let numel = n * shape.iter().product::<usize>();
    let images = Tensor::new(&[n, shape[0], shape[1], shape[2]], (0..numel).map(|_| rng.random_range(0.0..1.0)).collect())?;
    EpisodeInput::new(images, way, node_labels, hidden, 1)
}

/// End-to-end check: vector embedding, three graph blocks, readout and
/// loss on a 2-way 1-shot synthetic episode, probing every parameter.
pub fn end_to_end(seed: u64) -> Result<GradCheckReport> {
    let input = synthetic_episode(16, seed)?;
    let shape = [1, 4, 4];
    let mut model = Model::new(ModelConfig::new(ModelKind::Gnn, EmbeddingKind::Vector, shape, 2), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let coords = coordinates(&model.store, &[""], MODEL_PROBES, &mut rng);
    check_model(&mut model, &input, Mode::Train, &coords, DEFAULT_STEP, seed)
}

/// Convolutional embeddings at 16×16 inside the full model, in training
/// mode so that batch statistics and dropout are on the path.
pub fn embeddings(seed: u64) -> Result<Vec<ModuleCheck>> {
    let mut out = Vec::new();
    for (kind, channels) in [(EmbeddingKind::Omniglot, 1), (EmbeddingKind::MiniImagenet, 3)] {
        let shape = [channels, 16, 16];
        let input = random_image_episode(shape, 2, vec![Some(0), Some(1), None], vec![], seed)?;
        let mut model = Model::new(ModelConfig::new(ModelKind::Gnn, kind, shape, 2), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let coords = coordinates(&model.store, &["embed."], MODEL_PROBES, &mut rng);
        let report = check_model(&mut model, &input, Mode::Train, &coords, CONV_STEP, seed)?;
        out.push(ModuleCheck { name: format!("embedding/{kind}"), report });
    }
    Ok(out)
}

/// Graph blocks and readout of the end-to-end model.
pub fn gnn(seed: u64) -> Result<GradCheckReport> {
    let input = synthetic_episode(16, seed)?;
    let mut model = Model::new(ModelConfig::new(ModelKind::Gnn, EmbeddingKind::Vector, [1, 4, 4], 2), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let coords = coordinates(&model.store, &["gnn."], MODEL_PROBES, &mut rng);
    check_model(&mut model, &input, Mode::Train, &coords, DEFAULT_STEP, seed)
}

/// Attention scorer and the blocks around the injected label, with the
/// query chosen by arg-max so the selection is fixed.
pub fn active(seed: u64) -> Result<GradCheckReport> {
    let shape = [1, 4, 4];
    let labels = vec![Some(0), Some(1), Some(2), None, None, None, None];
    let input = random_image_episode(shape, 3, labels, vec![1, 0, 2], seed)?;
    let mut cfg = ModelConfig::new(ModelKind::Gnn, EmbeddingKind::Vector, shape, 3);
    cfg.active = true;
    cfg.query_policy = QueryPolicy::Learned;
    let mut model = Model::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let coords = coordinates(&model.store, &["active.", "gnn.block0."], MODEL_PROBES, &mut rng);
    check_model(&mut model, &input, Mode::Eval, &coords, DEFAULT_STEP, seed)
}

/// Runs one named module, or all of them for `None`.
pub fn run(module: Option<&str>, seed: u64) -> Result<Vec<ModuleCheck>> {
    let selected: Vec<&str> = match module {
        None => MODULES.to_vec(),
        Some(m) if MODULES.contains(&m) => vec![m],
        Some(m) => return Err(Error::Config(format!("unknown gradcheck module {m:?}; expected one of {MODULES:?}"))),
    };
    let mut out = Vec::new();
    for m in selected {
        match m {
            "tensor" => out.extend(
                primitive_suite(seed)?
                    .into_iter()
                    .map(|(name, report)| ModuleCheck { name: format!("tensor/{name}"), report }),
            ),
            "embedding" => out.extend(embeddings(seed)?),
            "gnn" => out.push(ModuleCheck { name: "gnn".into(), report: gnn(seed)? }),
            "active" => out.push(ModuleCheck { name: "active".into(), report: active(seed)? }),
            "model" => out.push(ModuleCheck { name: "model".into(), report: end_to_end(seed)? }),
            _ => unreachable!(),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_is_rejected() {
        assert!(matches!(run(Some("nope"), 0), Err(Error::Config(_))));
    }

    #[test]
    fn coordinates_respect_prefixes() {
        let model = Model::new(ModelConfig::new(ModelKind::Gnn, EmbeddingKind::Vector, [1, 4, 4], 2), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let coords = coordinates(&model.store, &["gnn."], 50, &mut rng);
        assert_eq!(coords.len(), 50);
        assert!(coords.iter().all(|&(id, _)| model.store.name(id).starts_with("gnn.")));
    }
}
