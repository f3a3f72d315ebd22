use std::sync::Arc;

use rand::{Rng, SeedableRng};

use super::*;
use crate::data::{generate_synthetic, Dataset, SyntheticSpec};
use crate::gradcheck::{max_param_rel_err, random_probes};
use crate::graph::{build_graph, CrystalStructure};
use crate::tensor::optim::AdamW;
use crate::text::Vocab;

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        d_node: 8,
        d_text: 8,
        d_model: 8,
        heads: 2,
        fusion_layers: 1,
        conv_layers: 1,
        mlp_dims: vec![12, 2],
        dropout: 0.1,
        max_tokens: 12,
        graph: GraphConfig {
            num_centers: 10,
            ..GraphConfig::default()
        },
        ..ModelConfig::default()
    }
}

struct Fixture {
    data: Dataset,
    vocab: Vocab,
    ids: Vec<String>,
}

fn fixture(n: usize, graph: &GraphConfig) -> Fixture {
    let syn = generate_synthetic(&SyntheticSpec {
        num_devices: n,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let data = Dataset::new(syn.records, &syn.structures, graph).unwrap();
    let ids: Vec<String> = data.records.iter().map(|r| r.device_id.clone()).collect();
    let vocab = Vocab::build(data.layer_corpus(&ids), 1);
    Fixture { data, vocab, ids }
}

fn batch(f: &Fixture, ids: &[String], max_tokens: usize) -> DeviceBatch {
    DeviceBatch::build(ids, &f.data, &f.vocab, max_tokens).unwrap()
}

#[test]
fn nll_unit_values() {
    let mut t = Tape::new();
    let mu = t.constant(&[1, 1], vec![3.0]);
    let one = t.constant(&[1, 1], vec![1.0]);
    let l = nll_loss(&mut t, &[mu], &[one], &[3.0]).unwrap();
    assert_eq!(t.scalar(l), 0.0);

    let two = t.constant(&[1, 1], vec![2.0]);
    let l = nll_loss(&mut t, &[mu], &[two], &[5.0]).unwrap();
    assert!((t.scalar(l) - (4f64.ln() + 1.0) / 2.0).abs() < 1e-12);
    let l = nll_loss(&mut t, &[mu], &[two], &[1.0]).unwrap();
    assert!((t.scalar(l) - (4f64.ln() + 1.0) / 2.0).abs() < 1e-12);

    // batch mean of the two cases
    let l = nll_loss(&mut t, &[mu, mu], &[one, two], &[3.0, 5.0]).unwrap();
    assert!((t.scalar(l) - (4f64.ln() + 1.0) / 4.0).abs() < 1e-12);

    let zero = t.constant(&[1, 1], vec![0.0]);
    assert!(matches!(nll_loss(&mut t, &[mu], &[zero], &[1.0]), Err(Error::Contract(_))));
    assert!(matches!(nll_loss(&mut t, &[mu], &[one], &[1.0, 2.0]), Err(Error::Contract(_))));

    let l = mse_loss(&mut t, &[mu, mu], &[1.0, 3.0]).unwrap();
    assert_eq!(t.scalar(l), 2.0);
    let p = Prediction { mu: 3.0, sigma: 2.0 };
    assert!((nll_value(&p, 5.0) - (4f64.ln() + 1.0) / 2.0).abs() < 1e-12);
}

#[test]
fn nll_gradient_matches_closed_form() {
    let (m, s, y) = (0.7, 1.3, 2.1);
    let mut t = Tape::new();
    let mu = t.leaf(&Tensor::new(vec![1, 1], vec![m]).unwrap().with_grad());
    let sigma = t.leaf(&Tensor::new(vec![1, 1], vec![s]).unwrap().with_grad());
    let l = nll_loss(&mut t, &[mu], &[sigma], &[y]).unwrap();
    let g = t.backward(l).unwrap();
    let dmu = -(y - m) / (s * s);
    let dsigma = 1.0 / s - (y - m).powi(2) / s.powi(3);
    assert!((g.get(mu).unwrap()[0] - dmu).abs() < 1e-12);
    assert!((g.get(sigma).unwrap()[0] - dsigma).abs() < 1e-12);
}

#[test]
fn config_validation_names_keys() {
    let bad = |f: fn(&mut ModelConfig)| {
        let mut c = ModelConfig::default();
        f(&mut c);
        match c.validate() {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        }
    };
    assert_eq!(bad(|c| c.mlp_dims = vec![16, 1]), "model.mlp_dims");
    assert_eq!(bad(|c| c.heads = 3), "model.heads");
    assert_eq!(bad(|c| c.dropout = 1.0), "model.dropout");
    assert_eq!(bad(|c| c.sigma2_min = 0.0), "model.sigma2_min");
    let mut mse = ModelConfig {
        head: HeadKind::Mse,
        ..ModelConfig::default()
    };
    assert!(mse.validate().is_err());
    mse.mlp_dims = vec![128, 64, 1];
    mse.validate().unwrap();
    ModelConfig::default().validate().unwrap();
}

#[test]
fn predictions_do_not_depend_on_batch_composition() {
    let cfg = small_config(Variant::CoAttention);
    let f = fixture(40, &cfg.graph);
    let (model, store) = Model::new(cfg.clone(), f.vocab.len(), 5).unwrap();
    let ids = &f.ids[..16];
    let full = model
        .predict(&store, &batch(&f, ids, cfg.max_tokens), ExecPolicy::Sequential)
        .unwrap();
    for (i, id) in ids.iter().enumerate() {
        let one = model
            .predict(&store, &batch(&f, std::slice::from_ref(id), cfg.max_tokens), ExecPolicy::Sequential)
            .unwrap()[0];
        assert!((one.mu - full[i].mu).abs() < 1e-9);
        assert!((one.sigma - full[i].sigma).abs() < 1e-9);
        assert!(one.sigma >= cfg.sigma_floor());
    }
    let par = model
        .predict(&store, &batch(&f, ids, cfg.max_tokens), ExecPolicy::Parallel)
        .unwrap();
    assert_eq!(par, full);
}

fn predict_structure(model: &Model, store: &ParamStore, f: &Fixture, s: &CrystalStructure) -> Prediction {
    let mut item = f.data.item(&f.ids[0], &f.vocab, model.config.max_tokens).unwrap();
    item.graph = Some(Arc::new(build_graph(s, &model.config.graph).unwrap()));
    model
        .predict(store, &DeviceBatch::new(vec![item]), ExecPolicy::Sequential)
        .unwrap()[0]
}

fn random_structure(rng: &mut ChaCha8Rng, n: usize) -> CrystalStructure {
    let lattice = [
        [5.0 + rng.random::<f64>(), 0.3 * rng.random::<f64>(), 0.0],
        [0.2 * rng.random::<f64>(), 5.5 + rng.random::<f64>(), 0.1],
        [0.1, 0.2 * rng.random::<f64>(), 6.0 + rng.random::<f64>()],
    ];
    let frac = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let zs = (0..n).map(|_| rng.random_range(1..90)).collect();
    CrystalStructure::new(lattice, frac, zs, "R").unwrap()
}

fn rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // orthonormalized random vectors: a rotation or reflection
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        let mut v: [f64; 3] = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
        for row in r.iter().take(i) {
            let d: f64 = (0..3).map(|k| v[k] * row[k]).sum();
            (0..3).for_each(|k| v[k] -= d * row[k]);
        }
        let n = (v.iter().map(|x| x * x).sum::<f64>()).sqrt();
        r[i] = v.map(|x| x / n);
    }
    r
}

#[test]
fn outputs_are_invariant_to_rigid_motion_and_relabeling() {
    let cfg = small_config(Variant::CoAttention);
    let f = fixture(12, &cfg.graph);
    let (model, store) = Model::new(cfg, f.vocab.len(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let s = random_structure(&mut rng, 8);
        let base = predict_structure(&model, &store, &f, &s);
        let r = rotation(&mut rng);
        let moved = s.transformed(&r).translated([1.3, -0.4, 2.2]);
        let p = predict_structure(&model, &store, &f, &moved);
        assert!((p.mu - base.mu).abs() < 1e-8 && (p.sigma - base.sigma).abs() < 1e-8);
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let p = predict_structure(&model, &store, &f, &s.permuted(&perm));
        assert!((p.mu - base.mu).abs() < 1e-9 && (p.sigma - base.sigma).abs() < 1e-9);
    }
}

fn check_gradients(variant: Variant, head: HeadKind) -> f64 {
    let mut cfg = small_config(variant);
    cfg.head = head;
    if head == HeadKind::Mse {
        cfg.mlp_dims = vec![12, 1];
    }
    let f = fixture(12, &cfg.graph);
    let (mut model, store) = Model::new(cfg.clone(), f.vocab.len(), 11).unwrap();
    model.target = TargetScale { shift: 12.0, scale: 4.0 };
    let b = batch(&f, &f.ids[..3], cfg.max_tokens);
    let (_, grads) = model.batch_gradients(&store, &b, 7, 3, ExecPolicy::Sequential).unwrap();
    let analytic = ParamGrads::sum(&grads);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let probes = random_probes(&store, 20, &mut rng);
    let loss = |s: &ParamStore| {
        model
            .batch_gradients(s, &b, 7, 3, ExecPolicy::Sequential)
            .unwrap()
            .0
    };
    max_param_rel_err(&store, &probes, &analytic, loss, 1e-6, 1e-7)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for variant in [Variant::CoAttention, Variant::ConcatMlp, Variant::TextMlp] {
        let err = check_gradients(variant, HeadKind::GaussianNll);
        assert!(err < 1e-4, "{variant:?}: {err}");
    }
    let err = check_gradients(Variant::CoAttention, HeadKind::Mse);
    assert!(err < 1e-4, "mse: {err}");
}

#[test]
fn baselines_use_the_expected_inputs() {
    let cfg = small_config(Variant::TextMlp);
    let f = fixture(12, &cfg.graph);
    let (model, store) = Model::new(cfg, f.vocab.len(), 3).unwrap();
    assert!(model.graph_encoder.is_none() && model.fusion.is_none());
    assert!(store.iter().all(|(_, p)| !p.name.starts_with("graph.")));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = predict_structure(&model, &store, &f, &random_structure(&mut rng, 5));
    let b = predict_structure(&model, &store, &f, &random_structure(&mut rng, 9));
    assert_eq!(a, b);

    let cfg = small_config(Variant::ConcatMlp);
    let (model, store) = Model::new(cfg, f.vocab.len(), 3).unwrap();
    assert!(model.fusion.as_ref().unwrap().layers.is_empty());
    let a = predict_structure(&model, &store, &f, &random_structure(&mut rng, 5));
    let b = predict_structure(&model, &store, &f, &random_structure(&mut rng, 9));
    assert_ne!(a, b);
}

#[test]
fn frozen_encoders_get_no_updates() {
    let mut cfg = small_config(Variant::CoAttention);
    cfg.freeze_text_encoder = true;
    let f = fixture(12, &cfg.graph);
    let (model, mut store) = Model::new(cfg.clone(), f.vocab.len(), 3).unwrap();
    let before = store.clone();
    let b = batch(&f, &f.ids[..4], cfg.max_tokens);
    let (_, grads) = model.batch_gradients(&store, &b, 1, 0, ExecPolicy::Sequential).unwrap();
    store.zero_grad();
    grads.iter().for_each(|g| store.accumulate(g));
    let mut opt = AdamW::new(&store, (0.9, 0.999), 1e-8, 0.0);
    opt.step(&mut store, |_| 1e-2);
    for ((_, p), (_, q)) in store.iter().zip(before.iter()) {
        let same = p.tensor.data() == q.tensor.data();
        assert_eq!(same, p.name.starts_with("text."), "{}", p.name);
    }
}

/// Train on a fixed subset and return the per-step batch losses.
fn fit(model: &Model, store: &mut ParamStore, b: &DeviceBatch, steps: usize, lr: f64) -> Vec<f64> {
    let mut opt = AdamW::new(store, (0.9, 0.999), 1e-8, 0.0);
    (0..steps)
        .map(|step| {
            let (l, grads) = model
                .batch_gradients(store, b, 1, step as u64, ExecPolicy::auto())
                .unwrap();
            store.zero_grad();
            grads.iter().for_each(|g| store.accumulate(g));
            opt.step(store, |_| lr);
            l
        })
        .collect()
}

#[test]
fn training_reduces_nll() {
    let mut cfg = small_config(Variant::CoAttention);
    cfg.dropout = 0.0;
    let f = fixture(24, &cfg.graph);
    let (mut model, mut store) = Model::new(cfg.clone(), f.vocab.len(), 8).unwrap();
    let b = batch(&f, &f.ids[..16], cfg.max_tokens);
    model.target = TargetScale::fit(&b.targets());
    let losses = fit(&model, &mut store, &b, 200, 3e-3);
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < head - 0.5, "{head} -> {tail}");
}

#[test]
fn sigma_recovers_constant_noise() {
    // every device has the same inputs, so the best Gaussian has the sample
    // mean and standard deviation of the targets
    let mut cfg = small_config(Variant::TextMlp);
    cfg.dropout = 0.0;
    let f = fixture(12, &cfg.graph);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let template = f.data.item(&f.ids[0], &f.vocab, cfg.max_tokens).unwrap();
    let targets: Vec<f64> = (0..200)
        .map(|_| {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            10.0 + 2.0 * z
        })
        .collect();
    let items = targets
        .iter()
        .map(|&y| {
            let mut it = template.clone();
            it.target = Some(y);
            it
        })
        .collect();
    let b = DeviceBatch::new(items);
    let (model, mut store) = Model::new(cfg, f.vocab.len(), 2).unwrap();
    fit(&model, &mut store, &b, 400, 3e-2);
    let p = model
        .predict(&store, &DeviceBatch::new(vec![template]), ExecPolicy::Sequential)
        .unwrap()[0];
    let mean = targets.iter().sum::<f64>() / 200.0;
    let sd = (targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 200.0).sqrt();
    assert!((p.mu - mean).abs() < 0.1, "{} vs {mean}", p.mu);
    assert!((1.6..=2.4).contains(&p.sigma), "{}", p.sigma);
    assert!((p.sigma - sd).abs() < 0.1, "{} vs {sd}", p.sigma);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = small_config(Variant::CoAttention);
    let f = fixture(12, &cfg.graph);
    let (mut model, store) = Model::new(cfg.clone(), f.vocab.len(), 13).unwrap();
    model.target = TargetScale { shift: 9.5, scale: 3.25 };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model, &store, &f.vocab).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model.config, cfg);
    assert_eq!(ck.model.target, model.target);
    assert_eq!(ck.vocab, f.vocab);
    let b = batch(&f, &f.ids, cfg.max_tokens);
    let p = model.predict(&store, &b, ExecPolicy::Sequential).unwrap();
    let q = ck.model.predict(&ck.store, &b, ExecPolicy::Sequential).unwrap();
    assert_eq!(p, q);

    let mut other = cfg.clone();
    other.graph.cutoff = 6.0;
    let (key, _, _) = cfg.first_difference(&other).unwrap();
    assert_eq!(key, "graph.cutoff");
    assert!(cfg.first_difference(&cfg).is_none());

    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}
