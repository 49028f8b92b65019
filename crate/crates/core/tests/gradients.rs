use graphshot::active::{select_one, QueryPolicy};
use graphshot::embedding::EmbeddingKind;
use graphshot::episodes::{sample_informative_episode, synth_dataset, SynthSpec};
use graphshot::harness::episode_loss;
use graphshot::harness::gradcheck::{self, GRADCHECK_TOL};
use graphshot::model::{Model, ModelConfig, ModelKind};
use graphshot_tensor::gradcheck::primitive_suite;
use graphshot_tensor::Mode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_passes() {
    for seed in 0..2 {
        for (name, report) in primitive_suite(seed).unwrap() {
            assert!(report.passed(GRADCHECK_TOL), "{name}: max relative error {}", report.max_rel_err());
        }
    }
}

#[test]
fn end_to_end_model_passes_with_thirty_or_more_probes() {
    for seed in 0..2 {
        let report = gradcheck::end_to_end(seed).unwrap();
        assert!(report.probes.len() >= 30);
        assert!(report.passed(GRADCHECK_TOL), "max relative error {}", report.max_rel_err());
    }
}

#[test]
fn attention_scorer_gradients_pass() {
    let report = gradcheck::active(3).unwrap();
    assert!(report.probes.iter().any(|p| p.label.starts_with("active.")));
    assert!(report.passed(GRADCHECK_TOL), "max relative error {}", report.max_rel_err());
}

fn active_model(policy: QueryPolicy, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(ModelKind::Gnn, EmbeddingKind::Vector, [1, 4, 4], 5);
    cfg.active = true;
    cfg.query_policy = policy;
    Model::new(cfg, seed).unwrap()
}

#[test]
fn query_loss_reaches_the_scorer() {
    let split = synth_dataset(&SynthSpec::new(10, 16, 3.0), &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
    let model = active_model(QueryPolicy::Learned, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for mode in [Mode::Train, Mode::Eval] {
        let input = sample_informative_episode(&split, 5, 4, &mut rng).unwrap().to_input(&split).unwrap();
        let mut fwd = model.forward(&input, mode, 1).unwrap();
        let lp = fwd.trace.log_probs;
        let loss = episode_loss(&mut fwd.ctx.tape, lp, input.answer).unwrap();
        let grads = fwd.ctx.tape.backward(loss).unwrap();
        let scorer: Vec<_> = model.store.ids().filter(|&id| model.store.name(id).starts_with("active.g")).collect();
        assert!(!scorer.is_empty());
        let norm: f64 = scorer.iter().filter_map(|&id| grads.param(id)).flat_map(|g| g.data().iter().map(|v| v * v)).sum();
        assert!(norm > 0.0, "{mode:?}: no gradient reaches the scorer");
    }
}

#[test]
fn evaluation_queries_are_deterministic() {
    let split = synth_dataset(&SynthSpec::new(10, 16, 3.0), &mut ChaCha8Rng::seed_from_u64(34)).unwrap();
    let model = active_model(QueryPolicy::Learned, 35);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..20 {
        let input = sample_informative_episode(&split, 5, 4, &mut rng).unwrap().to_input(&split).unwrap();
        let a = model.forward(&input, Mode::Eval, 1).unwrap();
        let b = model.forward(&input, Mode::Eval, 2).unwrap();
        assert_eq!(a.log_probs(), b.log_probs());
        assert_eq!(a.pick.unwrap().node, b.pick.unwrap().node);
    }
}

#[test]
fn multinomial_draws_follow_the_attention() {
    let attention = [0.05, 0.15, 0.3, 0.1, 0.4];
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut counts = [0usize; 5];
    for _ in 0..draws {
        counts[select_one(&attention, Mode::Train, &mut rng)] += 1;
    }
    for (&p, &c) in attention.iter().zip(&counts) {
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        let freq = c as f64 / draws as f64;
        assert!((freq - p).abs() < 3.0 * se, "p {p}: frequency {freq}");
    }
}
