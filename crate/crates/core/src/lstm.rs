//! Multi-layer LSTM backbone with an additive cell-state injection point.
//!
//! Gate layout inside the fused per-layer matrices is `[i | f | o | c]`.
//! Checkpoint names keep the four gates separate
//! (`lstm.layer{l}.W_i`, `.U_f`, `.b_c`, ...).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

pub const GATES: [&str; 4] = ["i", "f", "o", "c"];

#[derive(Clone, Debug)]
pub struct LstmLayerParams {
    pub w: [ParamId; 4],
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
    pub d_in: usize,
    pub d_h: usize,
}

impl LstmLayerParams {
    /// Weights uniform in `[-1/sqrt(d_h), 1/sqrt(d_h)]`, forget bias +1,
    /// other biases 0.
    pub fn init<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let r = 1.0 / (d_h as f64).sqrt();
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for g in GATES {
            w.push(params.uniform(format!("{prefix}.W_{g}"), &[d_in, d_h], r, rng)?);
        }
        for g in GATES {
            u.push(params.uniform(format!("{prefix}.U_{g}"), &[d_h, d_h], r, rng)?);
        }
        for g in GATES {
            let bias = if g == "f" { 1.0 } else { 0.0 };
            b.push(params.constant(format!("{prefix}.b_{g}"), &[d_h], bias)?);
        }
        Ok(LstmLayerParams {
            w: w.try_into().unwrap(),
            u: u.try_into().unwrap(),
            b: b.try_into().unwrap(),
            d_in,
            d_h,
        })
    }

    pub fn scalar_count(d_in: usize, d_h: usize) -> usize {
        4 * (d_in * d_h + d_h * d_h + d_h)
    }

    /// Snapshot the layer into `g` with the four gates fused column-wise.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>) -> Result<BoundLstm> {
        let w: Vec<Var> = self.w.iter().map(|&id| g.param(params, id)).collect();
        let u: Vec<Var> = self.u.iter().map(|&id| g.param(params, id)).collect();
        let mut b = Vec::with_capacity(4);
        for &id in &self.b {
            let v = g.param(params, id);
            b.push(g.reshape(v, &[1, self.d_h])?);
        }
        let w = g.concat_cols(&w)?;
        let u = g.concat_cols(&u)?;
        let b = g.concat_cols(&b)?;
        let b = g.reshape(b, &[4 * self.d_h])?;
        Ok(BoundLstm {
            w,
            u,
            b,
            d_in: self.d_in,
            d_h: self.d_h,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub w: Var,
    pub u: Var,
    pub b: Var,
    pub d_in: usize,
    pub d_h: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmLayerState {
    pub h: Var,
    pub c: Var,
    pub t: usize,
}

impl LstmLayerState {
    pub fn zeros<T: Real>(g: &mut Graph<T>, batch: usize, d_h: usize) -> Self {
        LstmLayerState {
            h: g.constant(Tensor::zeros(vec![batch, d_h])),
            c: g.constant(Tensor::zeros(vec![batch, d_h])),
            t: 0,
        }
    }
}

/// Input to one recurrent step: raw `[B, d_in]` rows, or rows already
/// multiplied by the fused input matrix.
#[derive(Clone, Copy, Debug)]
pub enum StepInput {
    Raw(Var),
    Projected(Var),
}

/// One LSTM step over a batch of rows:
/// `c' = f⊙c + i⊙tanh(·) + mem_contrib`, `h' = o⊙tanh(c')`.
pub fn lstm_step<T: Real>(
    g: &mut Graph<T>,
    p: &BoundLstm,
    state: &LstmLayerState,
    x: StepInput,
    mem_contrib: Option<Var>,
) -> Result<LstmLayerState> {
    let d = p.d_h;
    if g.shape(state.h).get(1) != Some(&d) || g.shape(state.c) != g.shape(state.h) {
        return Err(Error::dim(
            "lstm_step",
            format!(
                "state h {:?} / c {:?} for hidden size {d}",
                g.shape(state.h),
                g.shape(state.c)
            ),
        ));
    }
    let xw = match x {
        StepInput::Raw(x) => {
            if g.shape(x).get(1) != Some(&p.d_in) {
                return Err(Error::dim(
                    "lstm_step",
                    format!("input {:?} for input size {}", g.shape(x), p.d_in),
                ));
            }
            g.matmul(x, p.w)?
        }
        StepInput::Projected(v) => v,
    };
    let hu = g.matmul(state.h, p.u)?;
    let pre = g.add(xw, hu)?;
    let pre = g.add_bias_row(pre, p.b)?;
    let ifo = g.slice_cols(pre, 0, 3 * d)?;
    let ifo = g.sigmoid(ifo)?;
    let gi = g.slice_cols(ifo, 0, d)?;
    let gf = g.slice_cols(ifo, d, d)?;
    let go = g.slice_cols(ifo, 2 * d, d)?;
    let cand = g.slice_cols(pre, 3 * d, d)?;
    let cand = g.tanh(cand)?;
    let keep = g.mul(gf, state.c)?;
    let write = g.mul(gi, cand)?;
    let mut c = g.add(keep, write)?;
    if let Some(m) = mem_contrib {
        if g.shape(m) != g.shape(c) {
            return Err(Error::dim(
                "lstm_step",
                format!("memory contribution {:?} vs cell {:?}", g.shape(m), g.shape(c)),
            ));
        }
        c = g.add(c, m)?;
    }
    let tc = g.tanh(c)?;
    let h = g.mul(go, tc)?;
    Ok(LstmLayerState {
        h,
        c,
        t: state.t + 1,
    })
}

/// Source of per-step additive cell-state contributions for the stack.
pub trait Injector<T: Real> {
    /// Reject injections aimed at layers the stack does not have.
    fn validate(&self, depth: usize) -> Result<()>;

    /// Contribution for `layer` at `step`, if any.
    fn contribution(&mut self, g: &mut Graph<T>, step: usize, layer: usize) -> Result<Option<Var>>;

    /// Called after `layer` has produced its hidden state for `step`.
    fn observe(&mut self, _g: &mut Graph<T>, _step: usize, _layer: usize, _h: Var) -> Result<()> {
        Ok(())
    }
}

pub struct NoInjection;

impl<T: Real> Injector<T> for NoInjection {
    fn validate(&self, _depth: usize) -> Result<()> {
        Ok(())
    }

    fn contribution(&mut self, _: &mut Graph<T>, _: usize, _: usize) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Precomputed contributions keyed by step, each aimed at one layer.
#[derive(Default)]
pub struct StaticInjections {
    by_step: BTreeMap<usize, Vec<(usize, Var)>>,
}

impl StaticInjections {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, step: usize, layer: usize, contribution: Var) {
        self.by_step.entry(step).or_default().push((layer, contribution));
    }

    pub fn is_empty(&self) -> bool {
        self.by_step.is_empty()
    }
}

impl<T: Real> Injector<T> for StaticInjections {
    fn validate(&self, depth: usize) -> Result<()> {
        for (step, list) in &self.by_step {
            for &(layer, _) in list {
                if layer >= depth {
                    return Err(Error::config(
                        "injections",
                        format!("step {step} targets layer {layer} but the stack has {depth} layers"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn contribution(&mut self, g: &mut Graph<T>, step: usize, layer: usize) -> Result<Option<Var>> {
        let Some(list) = self.by_step.get(&step) else {
            return Ok(None);
        };
        let mut acc: Option<Var> = None;
        for &(l, v) in list {
            if l == layer {
                acc = Some(match acc {
                    Some(a) => g.add(a, v)?,
                    None => v,
                });
            }
        }
        Ok(acc)
    }
}

/// A padded batch laid out for recurrent consumption: `x` is `[B*T, D]`
/// with row `b*T + t` holding sequence `b` at step `t`.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub x: Var,
    pub batch: usize,
    pub steps: usize,
    pub dim: usize,
    pub lengths: &'a [usize],
}

impl SeqInput<'_> {
    pub fn step_rows(&self, t: usize) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.steps + t).collect()
    }

    /// Which sequences are still running at step `t`, or `None` when all are.
    pub fn active(&self, t: usize) -> Option<Vec<bool>> {
        if self.lengths.iter().all(|&l| t < l) {
            None
        } else {
            Some(self.lengths.iter().map(|&l| t < l).collect())
        }
    }
}

/// Inverted dropout applied to the outputs passed between stacked layers.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub(crate) fn apply<T: Real>(&mut self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(v);
        }
        let keep = 1.0 - self.rate;
        let scale = T::lit(1.0 / keep);
        let shape = g.shape(v).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(v, m)
    }
}

#[derive(Debug)]
pub struct StackOutput {
    /// `hidden[layer][t]`, each `[B, d_h]`, before any dropout.
    pub hidden: Vec<Vec<Var>>,
    /// Top-layer hidden state after the final step. Because state is frozen
    /// past each sequence's length this is `h` at the sequence's last step.
    pub last: Var,
}

/// Run the stacked LSTM over a padded batch.
pub fn stack_forward<T: Real>(
    g: &mut Graph<T>,
    layers: &[BoundLstm],
    input: &SeqInput<'_>,
    injector: &mut dyn Injector<T>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<StackOutput> {
    let depth = layers.len();
    if depth == 0 {
        return Err(Error::config("depth", "stack needs at least one layer"));
    }
    injector.validate(depth)?;
    if layers[0].d_in != input.dim {
        return Err(Error::dim(
            "stack_forward",
            format!("layer 0 expects input size {}, got {}", layers[0].d_in, input.dim),
        ));
    }
    for (l, pair) in layers.windows(2).enumerate() {
        if pair[1].d_in != pair[0].d_h {
            return Err(Error::dim(
                "stack_forward",
                format!(
                    "layer {} expects input size {}, layer {l} produces {}",
                    l + 1,
                    pair[1].d_in,
                    pair[0].d_h
                ),
            ));
        }
    }
    if input.steps == 0 {
        return Err(Error::dim("stack_forward", "sequence has no steps"));
    }

    let projected = g.matmul(input.x, layers[0].w)?;
    let mut states: Vec<LstmLayerState> = layers
        .iter()
        .map(|p| LstmLayerState::zeros(g, input.batch, p.d_h))
        .collect();
    let mut hidden = vec![Vec::with_capacity(input.steps); depth];

    for t in 0..input.steps {
        let rows = input.step_rows(t);
        let active = input.active(t);
        let mut below: Option<Var> = None;
        for (l, p) in layers.iter().enumerate() {
            let x = match below {
                None => StepInput::Projected(g.gather_rows(projected, &rows)?),
                Some(h) => {
                    let h = match dropout.as_deref_mut() {
                        Some(d) => d.apply(g, h)?,
                        None => h,
                    };
                    StepInput::Raw(h)
                }
            };
            let contrib = injector.contribution(g, t, l)?;
            let prev = states[l];
            let mut next = lstm_step(g, p, &prev, x, contrib)?;
            if let Some(mask) = &active {
                next.h = g.select_rows(next.h, prev.h, mask)?;
                next.c = g.select_rows(next.c, prev.c, mask)?;
            }
            states[l] = next;
            hidden[l].push(next.h);
            injector.observe(g, t, l, next.h)?;
            below = Some(next.h);
        }
    }
    let last = states[depth - 1].h;
    Ok(StackOutput { hidden, last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(d_in: usize, d_h: usize, seed: u64) -> (ParamSet<f64>, LstmLayerParams) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = LstmLayerParams::init(&mut ps, "lstm.layer0", d_in, d_h, &mut rng).unwrap();
        (ps, p)
    }

    #[test]
    fn zero_weights_give_half_gates() {
        let (mut ps, p) = setup(3, 2, 1);
        for param in ps.iter_mut() {
            param.value.fill(0.0);
        }
        let mut g = Graph::new();
        let bound = p.bind(&mut g, &ps).unwrap();
        let c0 = [0.8, -1.2];
        let state = LstmLayerState {
            h: g.constant(Tensor::from_rows(&[vec![0.3, 0.1]])),
            c: g.constant(Tensor::from_rows(&[c0.to_vec()])),
            t: 4,
        };
        let x = g.constant(Tensor::from_rows(&[vec![5.0, -2.0, 1.0]]));
        let next = lstm_step(&mut g, &bound, &state, StepInput::Raw(x), None).unwrap();
        assert_eq!(next.t, 5);
        let c = g.value(next.c).data().to_vec();
        let h = g.value(next.h).data().to_vec();
        for k in 0..2 {
            assert_eq!(c[k], 0.5 * c0[k]);
            assert_eq!(h[k], 0.5 * (0.5 * c0[k]).tanh());
        }
    }

    #[test]
    fn zero_contribution_is_bit_exact_identity() {
        let (ps, p) = setup(3, 4, 7);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, &ps).unwrap();
        let state = LstmLayerState::zeros(&mut g, 2, 4);
        let x = g.constant(Tensor::from_f64(vec![2, 3], &[0.1, -0.4, 0.9, 1.1, 0.0, -0.3]).unwrap());
        let zero = g.constant(Tensor::zeros(vec![2, 4]));
        let a = lstm_step(&mut g, &bound, &state, StepInput::Raw(x), None).unwrap();
        let b = lstm_step(&mut g, &bound, &state, StepInput::Raw(x), Some(zero)).unwrap();
        assert_eq!(g.value(a.h), g.value(b.h));
        assert_eq!(g.value(a.c), g.value(b.c));
    }

    #[test]
    fn dimension_errors() {
        let (ps, p) = setup(3, 4, 7);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, &ps).unwrap();
        let state = LstmLayerState::zeros(&mut g, 1, 4);
        let bad_x = g.constant(Tensor::zeros(vec![1, 2]));
        assert!(matches!(
            lstm_step(&mut g, &bound, &state, StepInput::Raw(bad_x), None),
            Err(Error::Dimension { .. })
        ));
        let x = g.constant(Tensor::zeros(vec![1, 3]));
        let bad_m = g.constant(Tensor::zeros(vec![1, 5]));
        assert!(lstm_step(&mut g, &bound, &state, StepInput::Raw(x), Some(bad_m)).is_err());
    }

    #[test]
    fn injection_past_depth_is_config_error() {
        let (ps, p) = setup(2, 3, 3);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, &ps).unwrap();
        let x = g.constant(Tensor::zeros(vec![4, 2]));
        let lengths = [4];
        let input = SeqInput { x, batch: 1, steps: 4, dim: 2, lengths: &lengths };
        let c = g.constant(Tensor::zeros(vec![1, 3]));
        let mut inj = StaticInjections::new();
        inj.insert(1, 1, c);
        let err = stack_forward(&mut g, &[bound], &input, &mut inj, None).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn init_uses_forget_bias_one() {
        let (ps, _) = setup(2, 3, 3);
        assert_eq!(ps.by_name("lstm.layer0.b_f").unwrap().value.data(), &[1.0; 3]);
        assert_eq!(ps.by_name("lstm.layer0.b_i").unwrap().value.data(), &[0.0; 3]);
        let r = 1.0 / 3f64.sqrt();
        assert!(ps
            .by_name("lstm.layer0.U_o")
            .unwrap()
            .value
            .data()
            .iter()
            .all(|v| v.abs() <= r));
    }
}
