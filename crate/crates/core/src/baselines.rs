//! Reference recurrent cells for comparison runs: vanilla RNN, GRU, and an
//! additive multi-lag high-order RNN.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::lstm::{Dropout, SeqInput, StackOutput, StepInput};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    VanillaRnn,
    Gru,
    /// `h_t = tanh(W x_t + Σ_{j=1..order} U_j h_{t-j} + b)`
    HighOrderRnn { order: usize },
}

impl BaselineKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            BaselineKind::HighOrderRnn { order } if *order == 0 => {
                Err(Error::config("order", "high-order RNN needs order >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Number of past hidden states the cell reads.
    pub fn lags(&self) -> usize {
        match self {
            BaselineKind::HighOrderRnn { order } => *order,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaselineLayerParams {
    pub kind: BaselineKind,
    /// Input matrices: `[W]` for RNN/high-order, `[W_z, W_r, W_n]` for GRU.
    pub w: Vec<ParamId>,
    /// Recurrent matrices: `[U]`, `[U_1..U_n]`, or `[U_z, U_r, U_n]`.
    pub u: Vec<ParamId>,
    /// Biases: `[b]` or `[b_z, b_r, b_n]`.
    pub b: Vec<ParamId>,
    pub d_in: usize,
    pub d_h: usize,
}

impl BaselineLayerParams {
    pub fn init<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        kind: BaselineKind,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        kind.validate()?;
        let r = 1.0 / (d_h as f64).sqrt();
        let (w_names, u_names, b_names): (Vec<String>, Vec<String>, Vec<String>) = match kind {
            BaselineKind::VanillaRnn => (vec!["W".into()], vec!["U".into()], vec!["b".into()]),
            BaselineKind::HighOrderRnn { order } => (
                vec!["W".into()],
                (1..=order).map(|j| format!("U_{j}")).collect(),
                vec!["b".into()],
            ),
            BaselineKind::Gru => (
                ["W_z", "W_r", "W_n"].map(String::from).to_vec(),
                ["U_z", "U_r", "U_n"].map(String::from).to_vec(),
                ["b_z", "b_r", "b_n"].map(String::from).to_vec(),
            ),
        };
        let mut w = Vec::new();
        for n in &w_names {
            w.push(params.uniform(format!("{prefix}.{n}"), &[d_in, d_h], r, rng)?);
        }
        let mut u = Vec::new();
        for n in &u_names {
            u.push(params.uniform(format!("{prefix}.{n}"), &[d_h, d_h], r, rng)?);
        }
        let mut b = Vec::new();
        for n in &b_names {
            b.push(params.constant(format!("{prefix}.{n}"), &[d_h], 0.0)?);
        }
        Ok(BaselineLayerParams {
            kind,
            w,
            u,
            b,
            d_in,
            d_h,
        })
    }

    pub fn scalar_count(kind: BaselineKind, d_in: usize, d_h: usize) -> usize {
        match kind {
            BaselineKind::VanillaRnn => d_in * d_h + d_h * d_h + d_h,
            BaselineKind::HighOrderRnn { order } => d_in * d_h + order * d_h * d_h + d_h,
            BaselineKind::Gru => 3 * (d_in * d_h + d_h * d_h + d_h),
        }
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>) -> Result<BoundBaseline> {
        let d = self.d_h;
        let ws: Vec<Var> = self.w.iter().map(|&id| g.param(params, id)).collect();
        let us: Vec<Var> = self.u.iter().map(|&id| g.param(params, id)).collect();
        let mut bs = Vec::new();
        for &id in &self.b {
            let v = g.param(params, id);
            bs.push(g.reshape(v, &[1, d])?);
        }
        let w = if ws.len() == 1 { ws[0] } else { g.concat_cols(&ws)? };
        let b = if bs.len() == 1 { bs[0] } else { g.concat_cols(&bs)? };
        let b = g.reshape(b, &[self.b.len() * d])?;
        let (u, u_n) = match self.kind {
            BaselineKind::Gru => (vec![g.concat_cols(&us[..2])?], Some(us[2])),
            _ => (us, None),
        };
        Ok(BoundBaseline {
            kind: self.kind,
            w,
            u,
            u_n,
            b,
            d_in: self.d_in,
            d_h: d,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundBaseline {
    pub kind: BaselineKind,
    /// Fused input matrix `[d_in, gates*d_h]`.
    pub w: Var,
    /// RNN: `[U]`; high-order: `[U_1..U_n]`; GRU: `[U_z|U_r]`.
    pub u: Vec<Var>,
    /// GRU candidate recurrent matrix.
    pub u_n: Option<Var>,
    pub b: Var,
    pub d_in: usize,
    pub d_h: usize,
}

/// One baseline step. `history` holds previous hidden states, most recent
/// last, zero-padded so that it has at least `kind.lags()` entries.
pub fn baseline_step<T: Real>(
    g: &mut Graph<T>,
    p: &BoundBaseline,
    history: &[Var],
    x: StepInput,
) -> Result<Var> {
    let lags = p.kind.lags();
    if history.len() < lags {
        return Err(Error::dim(
            "baseline_step",
            format!("{} past states for a cell reading {lags}", history.len()),
        ));
    }
    let xw = match x {
        StepInput::Raw(x) => {
            if g.shape(x).get(1) != Some(&p.d_in) {
                return Err(Error::dim(
                    "baseline_step",
                    format!("input {:?} for input size {}", g.shape(x), p.d_in),
                ));
            }
            g.matmul(x, p.w)?
        }
        StepInput::Projected(v) => v,
    };
    let h_prev = history[history.len() - 1];
    if g.shape(h_prev).get(1) != Some(&p.d_h) {
        return Err(Error::dim(
            "baseline_step",
            format!("state {:?} for hidden size {}", g.shape(h_prev), p.d_h),
        ));
    }
    let xw = g.add_bias_row(xw, p.b)?;
    match p.kind {
        BaselineKind::VanillaRnn | BaselineKind::HighOrderRnn { .. } => {
            let mut pre = xw;
            for (j, &u) in p.u.iter().enumerate() {
                let past = history[history.len() - 1 - j];
                let r = g.matmul(past, u)?;
                pre = g.add(pre, r)?;
            }
            g.tanh(pre)
        }
        BaselineKind::Gru => {
            let d = p.d_h;
            let zr_x = g.slice_cols(xw, 0, 2 * d)?;
            let n_x = g.slice_cols(xw, 2 * d, d)?;
            let zr_h = g.matmul(h_prev, p.u[0])?;
            let zr = g.add(zr_x, zr_h)?;
            let zr = g.sigmoid(zr)?;
            let z = g.slice_cols(zr, 0, d)?;
            let r = g.slice_cols(zr, d, d)?;
            let rh = g.mul(r, h_prev)?;
            let n_h = g.matmul(rh, p.u_n.expect("GRU binds U_n"))?;
            let n = g.add(n_x, n_h)?;
            let n = g.tanh(n)?;
            // h' = (1 - z) ⊙ n + z ⊙ h = n + z ⊙ (h - n)
            let diff = g.sub(h_prev, n)?;
            let gated = g.mul(z, diff)?;
            g.add(n, gated)
        }
    }
}

/// Stacked baseline cells over a padded batch, with state frozen past each
/// sequence's length.
pub fn stack_forward<T: Real>(
    g: &mut Graph<T>,
    layers: &[BoundBaseline],
    input: &SeqInput<'_>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<StackOutput> {
    let depth = layers.len();
    if depth == 0 {
        return Err(Error::config("depth", "stack needs at least one layer"));
    }
    if layers[0].d_in != input.dim {
        return Err(Error::dim(
            "stack_forward",
            format!("layer 0 expects input size {}, got {}", layers[0].d_in, input.dim),
        ));
    }
    if input.steps == 0 {
        return Err(Error::dim("stack_forward", "sequence has no steps"));
    }
    let projected = g.matmul(input.x, layers[0].w)?;
    let mut histories: Vec<Vec<Var>> = layers
        .iter()
        .map(|p| {
            let z = g.constant(Tensor::zeros(vec![input.batch, p.d_h]));
            vec![z; p.kind.lags()]
        })
        .collect();
    let mut hidden = vec![Vec::with_capacity(input.steps); depth];
    for t in 0..input.steps {
        let rows = input.step_rows(t);
        let active = input.active(t);
        let mut below: Option<Var> = None;
        for (l, p) in layers.iter().enumerate() {
            let x = match below {
                None => StepInput::Projected(g.gather_rows(projected, &rows)?),
                Some(h) => StepInput::Raw(match dropout.as_deref_mut() {
                    Some(d) => d.apply(g, h)?,
                    None => h,
                }),
            };
            let hist = &mut histories[l];
            let prev = *hist.last().expect("non-empty history");
            let mut h = baseline_step(g, p, hist, x)?;
            if let Some(mask) = &active {
                h = g.select_rows(h, prev, mask)?;
            }
            // frozen sequences repeat their last state, which keeps every lag
            // of a finished sequence pinned to it as well
            hist.remove(0);
            hist.push(h);
            hidden[l].push(h);
            below = Some(h);
        }
    }
    let last = hidden[depth - 1][input.steps - 1];
    Ok(StackOutput { hidden, last })
}
