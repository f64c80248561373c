use nrnm::gradcheck::{check_gradients, check_model, FnObjective, GradCheckConfig};
use nrnm::{Graph, ModelConfig, ModelKind, NrnmConfig, OpKind, ParamSet, Result, SequenceBatch, SequenceModel, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduce to a scalar through fixed random weights so every output entry
/// carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, g.shape(x)));
    let y = g.mul(x, w)?;
    g.sum(y)
}

fn check_op<F>(shapes: &[(&str, &[usize])], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut params = ParamSet::new();
    for (name, shape) in shapes {
        params.insert(*name, random(&mut rng, shape)).unwrap();
    }
    let mut obj = FnObjective {
        params,
        f: |g: &mut Graph<f64>, p: &ParamSet<f64>| {
            let vars: Vec<Var> = p.iter().map(|(id, _)| g.param(p, id)).collect();
            let out = f(g, &vars)?;
            weighted_sum(g, out, 99)
        },
    };
    let report = check_gradients(&mut obj, &GradCheckConfig::default(), None).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn elementwise_ops() {
    let s: &[usize] = &[3, 4];
    check_op(&[("a", s), ("b", s)], |g, v| g.add(v[0], v[1]));
    check_op(&[("a", s), ("b", s)], |g, v| g.sub(v[0], v[1]));
    check_op(&[("a", s), ("b", s)], |g, v| g.mul(v[0], v[1]));
    check_op(&[("a", s)], |g, v| g.mul(v[0], v[0]));
    check_op(&[("a", s)], |g, v| g.scale(v[0], -2.5));
    check_op(&[("a", s)], |g, v| g.sigmoid(v[0]));
    check_op(&[("a", s)], |g, v| g.tanh(v[0]));
    check_op(&[("a", s), ("b", &[4])], |g, v| g.add_bias_row(v[0], v[1]));
}

#[test]
fn matrix_ops() {
    check_op(&[("a", &[3, 4]), ("b", &[4, 2])], |g, v| g.matmul(v[0], v[1]));
    check_op(&[("a", &[2, 3, 4]), ("b", &[2, 4, 5])], |g, v| g.batch_matmul(v[0], v[1], false));
    check_op(&[("a", &[2, 3, 4]), ("b", &[2, 5, 4])], |g, v| g.batch_matmul(v[0], v[1], true));
    check_op(&[("a", &[3, 5])], |g, v| g.softmax_rows(v[0]));
    check_op(&[("a", &[2, 3, 4])], |g, v| g.softmax_rows(v[0]));
}

#[test]
fn structural_ops() {
    check_op(&[("a", &[2, 3]), ("b", &[4, 3])], |g, v| g.concat_rows(&[v[0], v[1]]));
    check_op(&[("a", &[3, 2]), ("b", &[3, 4])], |g, v| g.concat_cols(&[v[0], v[1]]));
    check_op(&[("a", &[4, 3])], |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]));
    check_op(&[("a", &[3, 6])], |g, v| g.slice_cols(v[0], 2, 3));
    check_op(&[("a", &[3, 4])], |g, v| g.reshape(v[0], &[2, 6]));
    check_op(&[("a", &[3, 4]), ("b", &[3, 4])], |g, v| g.select_rows(v[0], v[1], &[true, false, true]));
    check_op(&[("a", &[4, 3])], |g, v| {
        let ce = g.cross_entropy(v[0], &[0, 2, 1, 2])?;
        g.scale(ce, 3.0)
    });
}

fn batch(rng: &mut ChaCha8Rng, b: usize, t: usize, d: usize, k: usize) -> SequenceBatch<f64> {
    let lengths = (0..b).map(|i| if i == 0 { t } else { rng.gen_range(1..=t) }).collect();
    let labels = (0..b).map(|_| rng.gen_range(0..k)).collect();
    SequenceBatch::new(random(rng, &[b, t, d]), lengths, labels).unwrap()
}

#[test]
fn every_backbone_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [ModelKind::Lstm, ModelKind::Rnn, ModelKind::Gru, ModelKind::Horder] {
        let mut model = SequenceModel::<f64>::new(ModelConfig::new(kind, 2, 4, 3, 3)).unwrap();
        let b = batch(&mut rng, 3, 6, 3, 3);
        let report = check_model(&mut model, &b, &GradCheckConfig::default(), None).unwrap();
        assert!(report.passed(), "{kind:?}\n{report}");
    }
    let cfg = ModelConfig::new(ModelKind::Nrnm, 2, 8, 3, 3).with_nrnm(NrnmConfig::new(3, 1, 2, 8, 2, 1));
    let mut model = SequenceModel::<f64>::new(cfg).unwrap();
    let b = batch(&mut rng, 2, 9, 3, 3);
    let report = check_model(&mut model, &b, &GradCheckConfig::default(), None).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn corrupted_backward_rules_are_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig::new(ModelKind::Nrnm, 1, 4, 3, 3).with_nrnm(NrnmConfig::new(3, 1, 2, 4, 2, 0));
    let b = batch(&mut rng, 2, 7, 3, 3);
    for kind in [
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::SoftmaxRows,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Mul,
        OpKind::GatherRows,
        OpKind::CrossEntropy,
    ] {
        let mut model = SequenceModel::<f64>::new(cfg.clone()).unwrap();
        let report = check_model(&mut model, &b, &GradCheckConfig::default(), Some((kind, 1.01))).unwrap();
        assert!(!report.passed(), "a 1% error in {kind:?} went unnoticed");
    }
}
