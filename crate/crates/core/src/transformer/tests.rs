use super::*;
use crate::rng::{self, Stream};
use crate::synth::{generate_problem, sample_theta, Priors};
use rand::seq::SliceRandom;
use rand::Rng;

fn tiny(shared: bool) -> ModelConfig {
    ModelConfig { d: 8, h: 2, layers: 1, dropout: 0.1, ff_mult: 4, cross_blocks: 1, share_set_weights: shared }
}

/// Initialized weights with every norm and affine nudged off its identity value,
/// so each tensor's gradient path is exercised.
fn jittered(cfg: &ModelConfig, seed: u64) -> TransformerWeights {
    let mut rng = rng::stream(seed);
    let mut w = init_model(cfg, &mut rng).unwrap();
    for (name, t) in w.named_tensors_mut() {
        if name.contains("gamma") || name.contains("beta") || name.starts_with("target") || name.starts_with("input") {
            for v in &mut t.data {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        if name.starts_with("head2") {
            for v in &mut t.data {
                *v *= 5.0;
            }
        }
    }
    w
}

fn problem(rng: &mut Stream) -> Problem {
    let priors = Priors::default();
    let (theta, design) = sample_theta(&priors, rng);
    generate_problem(&theta, &design, rng).unwrap()
}

fn batch_loss_value(w: &TransformerWeights, ps: &[&Problem], ts: &[Prediction]) -> f64 {
    backward_batch(w, ps, ts, &LossWeights::default(), None).unwrap().0
}

fn check_gradients(cfg: &ModelConfig) {
    let w = jittered(cfg, 21);
    let mut rng = rng::stream(22);
    let ps: Vec<Problem> = (0..3).map(|_| problem(&mut rng)).collect();
    let refs: Vec<&Problem> = ps.iter().collect();
    let ts: Vec<Prediction> = (0..3)
        .map(|_| Prediction { mu: rng.random_range(-2.0..1.0), beta: rng.random_range(-1.0..1.0), alpha: rng.random_range(-3.0..0.0) })
        .collect();
    let (_, g) = backward_batch(&w, &refs, &ts, &LossWeights::default(), None).unwrap();

    let h = 1e-4;
    let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = g.tensors().map(|t| t.data.clone()).collect();
    for (ti, name) in names.iter().enumerate() {
        let len = grads[ti].len();
        let mut fd = vec![0.0; len];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = w.clone();
            plus.tensors_mut().nth(ti).unwrap().data[i] += h;
            let mut minus = w.clone();
            minus.tensors_mut().nth(ti).unwrap().data[i] -= h;
            *slot = (batch_loss_value(&plus, &refs, &ts) - batch_loss_value(&minus, &refs, &ts)) / (2.0 * h);
        }
        let an = &grads[ti];
        let diff: f64 = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff <= 1e-3 * norm + 1e-9, "{name}: |an - fd| = {diff:e}, |fd| = {norm:e}");
        assert!(norm > 0.0 || name.contains("self") || name.contains("cross"), "{name} has no gradient");
    }
}

#[test]
fn gradients_match_finite_differences_shared() {
    check_gradients(&tiny(true));
}

#[test]
fn gradients_match_finite_differences_unshared_two_cross_blocks() {
    check_gradients(&ModelConfig { cross_blocks: 2, ..tiny(false) });
}

#[test]
fn gradient_vanishes_at_zero_loss() {
    let w = jittered(&tiny(true), 5);
    let p = problem(&mut rng::stream(6));
    let target = forward(&w, &p).unwrap();
    let (value, g) = backward(&w, &p, &target, &LossWeights::default()).unwrap();
    assert!(value < 1e-28);
    assert!(g.squared_norm() < 1e-24);
}

#[test]
fn gradients_are_deterministic() {
    let w = jittered(&tiny(true), 5);
    let p = problem(&mut rng::stream(7));
    let t = Prediction { mu: 0.0, beta: 0.5, alpha: -1.0 };
    let a = backward(&w, &p, &t, &LossWeights::default()).unwrap();
    let b = backward(&w, &p, &t, &LossWeights::default()).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn loss_examples() {
    let lw = LossWeights::default();
    let t = Prediction { mu: 1.0, beta: -0.5, alpha: -2.0 };
    assert_eq!(loss(&t, &t, &lw), 0.0);
    let off = Prediction { mu: 2.0, beta: 0.5, alpha: -1.0 };
    assert_eq!(loss(&off, &t, &lw), 4.0);
    assert!(loss(&Prediction { mu: -3.0, beta: 9.0, alpha: 0.1 }, &t, &lw) >= 0.0);
}

#[test]
fn permutation_within_sets_leaves_outputs_unchanged() {
    let w = init_model(&ModelConfig::desk(), &mut rng::stream(1)).unwrap();
    let mut rng = rng::stream(2);
    for _ in 0..20 {
        let p = problem(&mut rng);
        let base = forward(&w, &p).unwrap();
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.shuffle(&mut rng);
            let q = Problem::new(
                order.iter().map(|&i| p.counts()[i]).collect(),
                order.iter().map(|&i| p.exposures()[i]).collect(),
                order.iter().map(|&i| p.labels()[i]).collect(),
            )
            .unwrap();
            let out = forward(&w, &q).unwrap();
            for (a, b) in [(base.mu, out.mu), (base.beta, out.beta), (base.alpha, out.alpha)] {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-300), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn forward_is_pure_and_batch_consistent() {
    let w = init_model(&ModelConfig::desk(), &mut rng::stream(3)).unwrap();
    let mut rng = rng::stream(4);
    let ps: Vec<Problem> = (0..17).map(|_| problem(&mut rng)).collect();
    let batch = forward_batch(&w, &ps).unwrap();
    for (p, b) in ps.iter().zip(&batch) {
        let single = forward(&w, p).unwrap();
        assert_eq!(single, forward(&w, p).unwrap());
        for (x, y) in [(single.mu, b.mu), (single.beta, b.beta), (single.alpha, b.alpha)] {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let w = init_model(&ModelConfig::desk(), &mut rng::stream(3)).unwrap();
    let ws = w.cast::<f32>();
    let mut rng = rng::stream(8);
    let ps: Vec<Problem> = (0..50).map(|_| problem(&mut rng)).collect();
    let a = forward_batch(&w, &ps).unwrap();
    let b = forward_batch(&ws, &ps).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.mu - y.mu).abs() < 1e-4 && (x.beta - y.beta).abs() < 1e-4 && (x.alpha - y.alpha).abs() < 1e-4);
    }
}

#[test]
fn xi_has_four_d_entries() {
    for cfg in [ModelConfig::desk(), tiny(false)] {
        let w = init_model(&cfg, &mut rng::stream(1)).unwrap();
        let xi = features(&w, &problem(&mut rng::stream(2))).unwrap();
        assert_eq!(xi.len(), 4 * cfg.d);
    }
}

#[test]
fn set_size_bounds_are_enforced() {
    let w = init_model(&tiny(true), &mut rng::stream(1)).unwrap();
    let one = Problem::from_groups(&[1], &[1e4], &[2, 3], &[1e4, 1e4]).unwrap();
    assert!(matches!(forward(&w, &one), Err(Error::Precondition(_))));
    let big = Problem::from_groups(&[1; 11], &[1e4; 11], &[2, 3], &[1e4, 1e4]).unwrap();
    assert!(matches!(forward(&w, &big), Err(Error::Precondition(_))));
    let ok = Problem::from_groups(&[1; 10], &[1e4; 10], &[2, 3], &[1e4, 1e4]).unwrap();
    assert!(forward(&w, &ok).is_ok());
}

#[test]
fn dispersion_output_is_positive() {
    let w = init_model(&ModelConfig::desk(), &mut rng::stream(1)).unwrap();
    let mut rng = rng::stream(5);
    for _ in 0..100 {
        assert!(forward(&w, &problem(&mut rng)).unwrap().phi() > 0.0);
    }
}

#[test]
fn estimator_batch_matches_single_calls() {
    use crate::estimators::Estimator;
    let w = init_model(&ModelConfig::desk(), &mut rng::stream(1)).unwrap();
    let est = TransformerEstimator::with_precision(w, Precision::Double);
    let mut rng = rng::stream(9);
    let mut ps: Vec<Problem> = (0..5).map(|_| problem(&mut rng)).collect();
    ps.insert(2, Problem::from_groups(&[1], &[1e4], &[2, 3], &[1e4, 1e4]).unwrap());
    let batch = est.estimate_batch(&ps);
    assert!(batch[2].is_err());
    for (p, b) in ps.iter().zip(&batch).filter(|(_, b)| b.is_ok()) {
        let b = b.as_ref().unwrap();
        let s = est.estimate(p).unwrap();
        assert!((s.theta.beta - b.theta.beta).abs() < 1e-12);
        assert_eq!(b.method, crate::estimators::Method::Transformer);
    }
}

#[test]
fn short_training_run_is_reproducible_and_keeps_best() {
    let cfg = tiny(true);
    let tc = TrainConfig { n_epoch_problems: 256, epochs: 3, validation_size: 64, ..TrainConfig::desk() };
    let a = train(&cfg, &tc, &Priors::default(), &mut rng::stream(11)).unwrap();
    let b = train(&cfg, &tc, &Priors::default(), &mut rng::stream(11)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.log.rows.len(), 3);
    assert!(a.log.best_val_loss() <= a.log.initial_val_loss);
    assert!(a.log.to_csv().starts_with("epoch,train_loss,val_loss,lr\n1,"));
    assert_eq!(a.log.to_csv().lines().count(), 4);
}

#[test]
fn config_validation() {
    assert!(ModelConfig::full().validate().is_ok());
    assert!(ModelConfig { dropout: 1.0, ..tiny(true) }.validate().is_err());
    assert!(ModelConfig { layers: 0, ..tiny(true) }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::desk() }.validate().is_err());
    let json = serde_json::to_string(&ModelConfig::full()).unwrap();
    assert!(json.contains("\"L\":3"));
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), ModelConfig::full());
}

#[test]
fn run_configs_fill_missing_fields_from_the_desk_preset() {
    let cfg = RunConfig::from_toml_str("[model]\nd = 8\nh = 2\n[train]\nepochs = 2\n").unwrap();
    assert_eq!(cfg.model, ModelConfig { d: 8, h: 2, ..ModelConfig::desk() });
    assert_eq!(cfg.train, TrainConfig { epochs: 2, ..TrainConfig::desk() });
    assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    assert!(RunConfig::from_toml_str("[model]\nwidth = 3\n").is_err());
    assert!(RunConfig::from_toml_str("[model]\nd = 9\nh = 2\n").is_err());
}

#[test]
fn training_manifest_replays_the_run() {
    let run = RunConfig { model: tiny(true), train: TrainConfig { n_epoch_problems: 64, epochs: 1, validation_size: 32, ..TrainConfig::desk() } };
    let m = TrainManifest::new(5, Priors::default(), run);
    let back = TrainManifest::from_json(&m.to_json()).unwrap();
    assert_eq!(back, m);
    let (a, b) = (m.run().unwrap(), back.run().unwrap());
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.log.to_csv(), b.log.to_csv());
}

#[test]
fn divergence_is_reported_with_the_partial_log() {
    let tc = TrainConfig { n_epoch_problems: 64, epochs: 2, validation_size: 16, learning_rate: 1e39, ..TrainConfig::desk() };
    match train(&tiny(true), &tc, &Priors::default(), &mut rng::stream(1)) {
        Err(Error::Divergence { epoch, log, .. }) => {
            assert_eq!(epoch, 1);
            assert!(log.starts_with("epoch,train_loss,val_loss,lr\n"));
        }
        other => panic!("expected divergence, got {:?}", other.map(|t| t.log)),
    }
}
