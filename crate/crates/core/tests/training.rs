use nrnm::checkpoint;
use nrnm::tasks::{build_splits, Dataset, Sample, Splits, TaskSpec};
use nrnm::train::{adam_step, clip_gradients, evaluate, strip_wall_time, train, AdamState, TrainConfig, METRICS_HEADER};
use nrnm::{Mode, ModelConfig, ModelKind, NrnmConfig, ParamSet, SequenceModel, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn adam_three_steps_match_hand_recurrence() {
    let cfg = TrainConfig {
        lr: 0.01,
        beta1: 0.8,
        beta2: 0.95,
        eps: 1e-6,
        ..TrainConfig::default()
    };
    let mut params = ParamSet::<f64>::new();
    params.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    let mut state = AdamState::new(&params);
    let grads = [[0.1, -0.2, 0.0], [0.3, 0.1, -1.0], [-0.05, 0.4, 2.5]];

    let mut w = [0.5, -1.0, 2.0];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for (step, g) in grads.iter().enumerate() {
        let t = step as i32 + 1;
        for i in 0..3 {
            m[i] = 0.8 * m[i] + 0.2 * g[i];
            v[i] = 0.95 * v[i] + 0.05 * g[i] * g[i];
            let m_hat = m[i] / (1.0 - 0.8f64.powi(t));
            let v_hat = v[i] / (1.0 - 0.95f64.powi(t));
            w[i] -= 0.01 * m_hat / (v_hat.sqrt() + 1e-6);
        }
        params.by_name_mut("w").unwrap().grad.data_mut().copy_from_slice(g);
        adam_step(&mut params, &mut state, &cfg).unwrap();
        let got = params.by_name("w").unwrap().value.data();
        for i in 0..3 {
            assert!((got[i] - w[i]).abs() < 1e-12, "step {t} entry {i}");
        }
    }
    assert_eq!(state.t, 3);
}

proptest! {
    #[test]
    fn clipping_caps_norm_and_keeps_direction(
        grads in prop::collection::vec(-50.0f64..50.0, 1..20),
        max_norm in 0.01f64..20.0,
    ) {
        let mut params = ParamSet::<f64>::new();
        let split = grads.len() / 2;
        params.insert("a", Tensor::zeros(vec![split])).unwrap();
        params.insert("b", Tensor::zeros(vec![grads.len() - split])).unwrap();
        params.by_name_mut("a").unwrap().grad.data_mut().copy_from_slice(&grads[..split]);
        params.by_name_mut("b").unwrap().grad.data_mut().copy_from_slice(&grads[split..]);
        let pre = clip_gradients(&mut params, max_norm);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((pre - norm(&grads)).abs() <= 1e-12 * pre.max(1.0));
        let after: Vec<f64> = params.iter().flat_map(|(_, p)| p.grad.data().to_vec()).collect();
        let post = norm(&after);
        prop_assert!((post - pre.min(max_norm)).abs() <= 1e-9 * pre.max(1.0));
        if pre > 0.0 {
            let cos = grads.iter().zip(&after).map(|(a, b)| a * b).sum::<f64>() / (pre * post);
            prop_assert!((cos - 1.0).abs() < 1e-12);
        }
    }
}

fn small_model(kind: ModelKind, seed: u64) -> SequenceModel<f64> {
    let mut cfg = ModelConfig::new(kind, 1, 8, 10, 8);
    cfg.seed = seed;
    if kind == ModelKind::Nrnm {
        cfg = cfg.with_nrnm(NrnmConfig::new(4, 1, 2, 8, 2, 0));
    }
    SequenceModel::new(cfg).unwrap()
}

#[test]
fn small_gradient_step_decreases_loss() {
    let spec = TaskSpec::copy_memory(12, 6, 8, 2).with_counts(16, 0, 0);
    let data = build_splits(&spec).unwrap().train;
    let batch = data.batch::<f64>(&(0..16).collect::<Vec<_>>()).unwrap();
    for trial in 0..10 {
        let kind = [ModelKind::Lstm, ModelKind::Nrnm][trial % 2];
        let mut model = small_model(kind, trial as u64);
        model.params_mut().zero_grad();
        let (before, _) = model.loss_and_grad(&batch, Mode::Eval).unwrap();
        nrnm::train::sgd_step(model.params_mut(), 1e-5).unwrap();
        let (after, _) = model.loss(&batch, Mode::Eval).unwrap();
        assert!(after < before, "trial {trial}: {before} -> {after}");
    }
}

/// Sign of the first frame's first channel decides the label; every other
/// value is noise. Margins are at least 0.5.
fn separable(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d) = (6, 3);
    let samples = (0..n)
        .map(|_| {
            let label = rng.gen_range(0..2);
            let mut features: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mag = rng.gen_range(0.5..1.0);
            features[0] = if label == 1 { mag } else { -mag };
            Sample { features, len: t, label }
        })
        .collect();
    Dataset {
        dim: d,
        classes: 2,
        samples,
        labels: None,
    }
}

/// Plain logistic regression on the flattened sequence, by gradient descent.
fn logistic_accuracy(data: &Dataset) -> f64 {
    let width = data.samples[0].features.len();
    let mut w = vec![0.0; width + 1];
    for _ in 0..500 {
        let mut grad = vec![0.0; width + 1];
        for s in &data.samples {
            let z = w[width] + s.features.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - s.label as f64;
            for (g, x) in grad.iter_mut().zip(&s.features) {
                *g += err * x;
            }
            grad[width] += err;
        }
        for (w, g) in w.iter_mut().zip(&grad) {
            *w -= 0.5 * g / data.len() as f64;
        }
    }
    let correct = data
        .samples
        .iter()
        .filter(|s| {
            let z = w[width] + s.features.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>();
            usize::from(z > 0.0) == s.label
        })
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn separable_toy_set_is_learned() {
    let data = separable(128, 3);
    assert_eq!(logistic_accuracy(&data), 1.0, "toy set should be linearly separable");
    let splits = Splits {
        train: data,
        val: separable(0, 4),
        test: separable(0, 5),
    };
    let mut model = SequenceModel::<f64>::new(ModelConfig::new(ModelKind::Lstm, 1, 8, 3, 2)).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 50,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut sink = Vec::new();
    train(&mut model, &cfg, &splits, &mut sink).unwrap();
    let acc = evaluate(&model, &splits.train, 64).unwrap().accuracy;
    assert!(acc >= 0.99, "train accuracy {acc}");
}

fn tiny_splits() -> Splits {
    build_splits(&TaskSpec::copy_memory(10, 4, 4, 2).with_counts(64, 16, 16)).unwrap()
}

#[test]
fn same_seed_gives_identical_metrics_and_parameters() {
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 11,
        ..TrainConfig::default()
    };
    let splits = tiny_splits();
    let run = || {
        let mut mc = ModelConfig::new(ModelKind::Nrnm, 1, 8, 6, 4).with_nrnm(NrnmConfig::new(4, 1, 2, 8, 2, 0));
        mc.dropout = 0.2;
        mc.seed = 11;
        let mut model = SequenceModel::<f32>::new(mc).unwrap();
        let mut out = Vec::new();
        train(&mut model, &cfg, &splits, &mut out).unwrap();
        (strip_wall_time(&String::from_utf8(out).unwrap()), checkpoint::encode(model.params()))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let (c, _) = {
        let cfg = TrainConfig { seed: 12, ..cfg.clone() };
        let mut model = SequenceModel::<f32>::new(
            ModelConfig::new(ModelKind::Nrnm, 1, 8, 6, 4).with_nrnm(NrnmConfig::new(4, 1, 2, 8, 2, 0)),
        )
        .unwrap();
        let mut out = Vec::new();
        train(&mut model, &cfg, &splits, &mut out).unwrap();
        (strip_wall_time(&String::from_utf8(out).unwrap()), ())
    };
    assert_ne!(a, c);
}

#[test]
fn zero_epochs_writes_header_only() {
    let mut model = small_model(ModelKind::Lstm, 0);
    let before = checkpoint::encode(model.params());
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let splits = build_splits(&TaskSpec::copy_memory(12, 6, 8, 2).with_counts(8, 4, 4)).unwrap();
    let mut out = Vec::new();
    let report = train(&mut model, &cfg, &splits, &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), format!("{METRICS_HEADER}\n"));
    assert!(report.test.is_none());
    assert_eq!(report.steps, 0);
    assert_eq!(checkpoint::encode(model.params()), before);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let splits = tiny_splits();
    let mc = ModelConfig::new(ModelKind::Nrnm, 1, 8, 6, 4).with_nrnm(NrnmConfig::new(4, 1, 2, 8, 2, 0));
    let mut model = SequenceModel::<f32>::new(mc.clone()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    train(&mut model, &cfg, &splits, &mut Vec::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, model.params()).unwrap();
    let mut fresh = SequenceModel::<f32>::new(mc).unwrap();
    fresh.load_params(&checkpoint::load(&path).unwrap()).unwrap();
    let a = evaluate(&model, &splits.test, 8).unwrap();
    let b = evaluate(&fresh, &splits.test, 8).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.accuracy, b.accuracy);

    // Wrong precision, wrong architecture and corrupted bytes are rejected.
    assert_eq!(checkpoint::load::<f64>(&path).unwrap_err().exit_code(), 2);
    let mut other = small_model(ModelKind::Lstm, 0);
    let loaded = checkpoint::load::<f32>(&path).unwrap();
    let cast: ParamSet<f64> = {
        let mut p = ParamSet::new();
        for (_, q) in loaded.iter() {
            p.insert(q.name.clone(), q.value.cast()).unwrap();
        }
        p
    };
    assert_eq!(other.load_params(&cast).unwrap_err().exit_code(), 2);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(checkpoint::decode::<f32>(&bytes).is_err());
    assert!(checkpoint::decode::<f32>(b"garbage").is_err());
}
