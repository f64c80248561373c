//! Non-local recurrent memory cell.
//!
//! Every `win` steps, once a full block of `k` steps exists, the cell takes
//! `u = ceil(k/s)` strided hidden states of its backbone layer together with
//! the matching (projected) inputs, runs multi-head self-attention over those
//! `2u` units, passes the result through two residual sublayers, and keeps
//! the `u` rows at hidden-state positions as the memory embedding. The
//! memory state is then updated through sigmoid input/forget gates computed
//! from the strided inputs and the previous memory. From the step after the
//! block end, the memory reaches the LSTM cell state as
//! `g_m ⊙ (V_m · flatten(M))`.
//!
//! Batched layouts used throughout:
//!
//! * block source `C`: `[B*2u, m]`, rows `b*2u .. b*2u+u` are hidden
//!   units and rows `b*2u+u .. (b+1)*2u` are projected input units;
//! * memory `M`: `[B, u*m]`, row `b` is `flatten(M_b)` in row-major order;
//! * attention weights: one `[B, 2u, 2u]` tensor per head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::lstm::{Injector, SeqInput};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// Scale logits by `1/sqrt(m)` with `m` the full memory width.
    #[default]
    Full,
    /// Scale logits by `1/sqrt(m/heads)`.
    PerHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NrnmConfig {
    /// Block size in steps.
    pub k: usize,
    /// Stride used to pick units inside a block.
    pub s: usize,
    /// Steps between memory updates.
    pub win: usize,
    /// Memory width; must equal the hidden size of the injection layer.
    pub m: usize,
    pub heads: usize,
    pub inject_layer: usize,
    #[serde(default)]
    pub scale: AttentionScale,
    /// Further layers that get their own cell. Ablation only.
    #[serde(default)]
    pub extra_layers: Vec<usize>,
}

impl NrnmConfig {
    pub fn new(k: usize, s: usize, win: usize, m: usize, heads: usize, inject_layer: usize) -> Self {
        NrnmConfig {
            k,
            s,
            win,
            m,
            heads,
            inject_layer,
            scale: AttentionScale::Full,
            extra_layers: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "block size must be at least 1"));
        }
        if self.s == 0 || self.s > self.k {
            return Err(Error::config("s", format!("stride {} must lie in 1..={}", self.s, self.k)));
        }
        if self.win == 0 {
            return Err(Error::config("win", "sliding window must be at least 1"));
        }
        if self.heads == 0 || self.m == 0 || !self.m.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("memory width {} is not divisible by {} heads", self.m, self.heads),
            ));
        }
        Ok(())
    }

    /// Retained units per block, `ceil(k/s)`.
    pub fn units(&self) -> usize {
        self.k.div_ceil(self.s)
    }

    /// Every layer that hosts a cell, primary first.
    pub fn layers(&self) -> Vec<usize> {
        let mut out = vec![self.inject_layer];
        for &l in &self.extra_layers {
            if !out.contains(&l) {
                out.push(l);
            }
        }
        out
    }

    fn logit_scale(&self) -> f64 {
        match self.scale {
            AttentionScale::Full => 1.0 / (self.m as f64).sqrt(),
            AttentionScale::PerHead => 1.0 / ((self.m / self.heads) as f64).sqrt(),
        }
    }

    pub fn is_block_end(&self, t: usize) -> bool {
        t + 1 >= self.k && (t + 1 - self.k).is_multiple_of(self.win)
    }
}

/// Steps whose hidden states and inputs make up the block ending at `t`:
/// `t-k+1 + s*j` for `j` in `0..ceil(k/s)`.
pub fn block_steps(t: usize, cfg: &NrnmConfig) -> Result<Vec<usize>> {
    if t + 1 < cfg.k {
        return Err(Error::Usage(format!(
            "no complete block of {} steps ends at step {t}",
            cfg.k
        )));
    }
    let start = t + 1 - cfg.k;
    Ok((0..cfg.units()).map(|j| start + cfg.s * j).collect())
}

/// Block-end steps `k-1, k-1+win, ...` strictly below `steps`.
pub fn memory_schedule(steps: usize, cfg: &NrnmConfig) -> Vec<usize> {
    if steps < cfg.k || cfg.win == 0 {
        return Vec::new();
    }
    (cfg.k - 1..steps).step_by(cfg.win).collect()
}

/// The block end whose memory is visible at step `t`, if any: the latest
/// end strictly before `t`.
pub fn memory_provider(t: usize, cfg: &NrnmConfig) -> Option<usize> {
    if t < cfg.k {
        return None;
    }
    let last = t - 1;
    Some(last - (last + 1 - cfg.k) % cfg.win)
}

#[derive(Clone, Debug)]
pub struct NrnmParams {
    pub p_x: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub w_fc: ParamId,
    pub b_fc: ParamId,
    pub w_im: ParamId,
    pub b_im: ParamId,
    pub w_fm: ParamId,
    pub b_fm: ParamId,
    pub w_m: ParamId,
    pub u_m: ParamId,
    pub b_m: ParamId,
    pub v_m: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl NrnmParams {
    /// Matrices uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        cfg: &NrnmConfig,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if hidden != cfg.m {
            return Err(Error::config(
                "m",
                format!("memory width {} must equal the injection layer's hidden size {hidden}", cfg.m),
            ));
        }
        let (m, u, d) = (cfg.m, cfg.units(), input_dim);
        let mut mat = |params: &mut ParamSet<T>, name: &str, rows: usize, cols: usize| {
            params.uniform(format!("{prefix}.{name}"), &[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
        };
        let p_x = mat(params, "P_x", d, m)?;
        let w_q = mat(params, "W_q", m, m)?;
        let w_k = mat(params, "W_k", m, m)?;
        let w_v = mat(params, "W_v", m, m)?;
        let w_o = mat(params, "W_o", m, m)?;
        let w_fc = mat(params, "W_fc", m, m)?;
        let w_im = mat(params, "W_im", u * d + u * m, u * m)?;
        let w_fm = mat(params, "W_fm", u * d + u * m, u * m)?;
        let w_m = mat(params, "W_m", d, hidden)?;
        let u_m = mat(params, "U_m", u * m, hidden)?;
        let v_m = mat(params, "V_m", u * m, hidden)?;
        let b_fc = params.constant(format!("{prefix}.b_fc"), &[m], 0.0)?;
        let b_im = params.constant(format!("{prefix}.B_im"), &[u * m], 0.0)?;
        let b_fm = params.constant(format!("{prefix}.B_fm"), &[u * m], 0.0)?;
        let b_m = params.constant(format!("{prefix}.b_m"), &[hidden], 0.0)?;
        Ok(NrnmParams {
            p_x,
            w_q,
            w_k,
            w_v,
            w_o,
            w_fc,
            b_fc,
            w_im,
            b_im,
            w_fm,
            b_fm,
            w_m,
            u_m,
            b_m,
            v_m,
            input_dim,
            hidden,
        })
    }

    pub fn scalar_count(cfg: &NrnmConfig, input_dim: usize) -> usize {
        let (m, u, d) = (cfg.m, cfg.units(), input_dim);
        d * m + 5 * m * m + m + 2 * ((u * d + u * m) * u * m + u * m) + d * m + 2 * u * m * m + m
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>) -> BoundNrnm {
        let mut p = |id| g.param(params, id);
        BoundNrnm {
            p_x: p(self.p_x),
            w_q: p(self.w_q),
            w_k: p(self.w_k),
            w_v: p(self.w_v),
            w_o: p(self.w_o),
            w_fc: p(self.w_fc),
            b_fc: p(self.b_fc),
            w_im: p(self.w_im),
            b_im: p(self.b_im),
            w_fm: p(self.w_fm),
            b_fm: p(self.b_fm),
            w_m: p(self.w_m),
            u_m: p(self.u_m),
            b_m: p(self.b_m),
            v_m: p(self.v_m),
            input_dim: self.input_dim,
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundNrnm {
    pub p_x: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_fc: Var,
    pub b_fc: Var,
    pub w_im: Var,
    pub b_im: Var,
    pub w_fm: Var,
    pub b_fm: Var,
    pub w_m: Var,
    pub u_m: Var,
    pub b_m: Var,
    pub v_m: Var,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Memory matrix for every sequence in the batch, `[B, u*m]`.
#[derive(Clone, Copy, Debug)]
pub struct MemoryState {
    pub m: Var,
    /// Block-end step that produced this state.
    pub produced_at: Option<usize>,
    pub valid: bool,
}

impl MemoryState {
    /// The pre-first-block state: zero matrix, not valid.
    pub fn initial<T: Real>(g: &mut Graph<T>, batch: usize, cfg: &NrnmConfig) -> Self {
        MemoryState {
            m: g.constant(Tensor::zeros(vec![batch, cfg.units() * cfg.m])),
            produced_at: None,
            valid: false,
        }
    }
}

/// Source units of one block plus the strided raw inputs used by the gates.
#[derive(Clone, Debug)]
pub struct Block {
    /// `[B*2u, m]`
    pub source: Var,
    /// `[B, u*D]`
    pub inputs: Var,
    pub steps: Vec<usize>,
}

/// Gather the strided hidden states of the injection layer and the matching
/// projected inputs for the block ending at `t`.
pub fn assemble_block<T: Real>(
    g: &mut Graph<T>,
    hidden: &[Var],
    input: &SeqInput<'_>,
    t: usize,
    cfg: &NrnmConfig,
    p: &BoundNrnm,
) -> Result<Block> {
    let steps = block_steps(t, cfg)?;
    if t >= hidden.len() {
        return Err(Error::dim(
            "assemble_block",
            format!("block ends at step {t} but only {} hidden states exist", hidden.len()),
        ));
    }
    let (b, u, m, d) = (input.batch, steps.len(), cfg.m, input.dim);
    for &s in &steps {
        if g.shape(hidden[s]) != [b, m] {
            return Err(Error::dim(
                "assemble_block",
                format!("hidden state {:?} at step {s}, expected [{b}, {m}]", g.shape(hidden[s])),
            ));
        }
    }
    let rows: Vec<usize> = (0..b)
        .flat_map(|bi| steps.iter().map(move |&s| bi * input.steps + s))
        .collect();
    let x_units = g.gather_rows(input.x, &rows)?;
    let inputs = g.reshape(x_units, &[b, u * d])?;
    let projected = g.matmul(x_units, p.p_x)?;
    let projected = g.reshape(projected, &[b, u * m])?;
    let hid: Vec<Var> = steps.iter().map(|&s| hidden[s]).collect();
    let hid = g.concat_cols(&hid)?;
    let source = g.concat_cols(&[hid, projected])?;
    let source = g.reshape(source, &[b * 2 * u, m])?;
    Ok(Block {
        source,
        inputs,
        steps,
    })
}

pub struct Embedding {
    /// `[B, u*m]`
    pub m_tilde: Var,
    /// One `[B, 2u, 2u]` weight tensor per head.
    pub attention: Vec<Var>,
}

/// Multi-head self-attention over the block source, two residual sublayers
/// (`A = C + attn(C)`, `Z = A + tanh(A W_fc + b_fc)`), then the rows at
/// hidden-state positions.
pub fn memory_embedding<T: Real>(
    g: &mut Graph<T>,
    source: Var,
    batch: usize,
    cfg: &NrnmConfig,
    p: &BoundNrnm,
) -> Result<Embedding> {
    let (m, u) = (cfg.m, cfg.units());
    let n = 2 * u;
    if g.shape(source) != [batch * n, m] {
        return Err(Error::dim(
            "memory_embedding",
            format!("source {:?}, expected [{}, {m}]", g.shape(source), batch * n),
        ));
    }
    let stage = |stage: &str, e: Error| match e {
        Error::NonFinite { .. } => Error::NonFinite {
            stage: format!("memory_embedding/{stage}"),
        },
        other => other,
    };
    let q = g.matmul(source, p.w_q).map_err(|e| stage("query", e))?;
    let k = g.matmul(source, p.w_k).map_err(|e| stage("key", e))?;
    let v = g.matmul(source, p.w_v).map_err(|e| stage("value", e))?;
    let dh = m / cfg.heads;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let split = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let s = g.slice_cols(x, h * dh, dh)?;
            g.reshape(s, &[batch, n, dh])
        };
        let qh = split(g, q)?;
        let kh = split(g, k)?;
        let vh = split(g, v)?;
        let logits = g.batch_matmul(qh, kh, true)?;
        let logits = g.scale(logits, cfg.logit_scale()).map_err(|e| stage("logits", e))?;
        let w = g.softmax_rows(logits).map_err(|e| stage("softmax", e))?;
        let out = g.batch_matmul(w, vh, false)?;
        heads.push(g.reshape(out, &[batch * n, dh])?);
        attention.push(w);
    }
    let mixed = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let m_att = g.matmul(mixed, p.w_o).map_err(|e| stage("output mix", e))?;
    let a = g.add(source, m_att).map_err(|e| stage("first skip", e))?;
    let f = g.matmul(a, p.w_fc)?;
    let f = g.add_bias_row(f, p.b_fc)?;
    let f = g.tanh(f)?;
    let z = g.add(a, f).map_err(|e| stage("second skip", e))?;
    let rows: Vec<usize> = (0..batch).flat_map(|b| (0..u).map(move |j| b * n + j)).collect();
    let kept = g.gather_rows(z, &rows)?;
    let m_tilde = g.reshape(kept, &[batch, u * m])?;
    Ok(Embedding { m_tilde, attention })
}

/// Gated recurrent memory update
/// `M = G_i ⊙ tanh(M̃) + G_f ⊙ M_prev`, with both gates computed as
/// `sigmoid([x_block, M_prev] W + B)`.
pub fn update_memory<T: Real>(
    g: &mut Graph<T>,
    m_tilde: Var,
    prev: &MemoryState,
    inputs: Var,
    produced_at: usize,
    p: &BoundNrnm,
) -> Result<MemoryState> {
    if g.shape(m_tilde) != g.shape(prev.m) {
        return Err(Error::dim(
            "update_memory",
            format!("embedding {:?} vs previous memory {:?}", g.shape(m_tilde), g.shape(prev.m)),
        ));
    }
    let gate_in = g.concat_cols(&[inputs, prev.m])?;
    let gi = g.matmul(gate_in, p.w_im)?;
    let gi = g.add_bias_row(gi, p.b_im)?;
    let gi = g.sigmoid(gi)?;
    let gf = g.matmul(gate_in, p.w_fm)?;
    let gf = g.add_bias_row(gf, p.b_fm)?;
    let gf = g.sigmoid(gf)?;
    let squashed = g.tanh(m_tilde)?;
    let write = g.mul(gi, squashed)?;
    let keep = g.mul(gf, prev.m)?;
    let m = g.add(write, keep)?;
    Ok(MemoryState {
        m,
        produced_at: Some(produced_at),
        valid: true,
    })
}

/// Per-memory terms of the contribution, fixed between updates:
/// `flatten(M) U_m + b_m` and `flatten(M) V_m`.
#[derive(Clone, Copy, Debug)]
pub struct MemoryReadout {
    pub gate_bias: Var,
    pub value: Var,
}

pub fn memory_readout<T: Real>(g: &mut Graph<T>, mem: &MemoryState, p: &BoundNrnm) -> Result<MemoryReadout> {
    let gate = g.matmul(mem.m, p.u_m)?;
    let gate_bias = g.add_bias_row(gate, p.b_m)?;
    let value = g.matmul(mem.m, p.v_m)?;
    Ok(MemoryReadout { gate_bias, value })
}

/// `g_m ⊙ v'` where `g_m = sigmoid(x_t W_m + flatten(M) U_m + b_m)`,
/// given `x_t W_m` already computed.
pub fn gated_contribution<T: Real>(g: &mut Graph<T>, x_proj: Var, readout: &MemoryReadout) -> Result<Var> {
    let pre = g.add(x_proj, readout.gate_bias)?;
    let gate = g.sigmoid(pre)?;
    g.mul(gate, readout.value)
}

/// Memory contribution to the LSTM cell update for inputs `x_t` (`[B, D]`).
/// An invalid memory contributes the zero vector.
pub fn memory_contribution<T: Real>(
    g: &mut Graph<T>,
    mem: &MemoryState,
    x_t: Var,
    p: &BoundNrnm,
) -> Result<Var> {
    let batch = g.shape(x_t)[0];
    if !mem.valid {
        return Ok(g.constant(Tensor::zeros(vec![batch, p.hidden])));
    }
    let readout = memory_readout(g, mem, p)?;
    let x_proj = g.matmul(x_t, p.w_m)?;
    gated_contribution(g, x_proj, &readout)
}

/// Attention weights and memory produced by one block, for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub step: usize,
    pub layer: usize,
    pub sequence: usize,
    /// `2u` (rows and columns of each head's weights).
    pub units: usize,
    /// Row-major `[2u, 2u]` weights, one entry per head.
    pub heads: Vec<Vec<f64>>,
    /// Row-major `[u, m]` memory state after the update.
    pub memory: Vec<f64>,
}

struct CellRuntime {
    layer: usize,
    params: BoundNrnm,
    hidden: Vec<Var>,
    memory: MemoryState,
    readout: Option<MemoryReadout>,
    x_proj: Option<Var>,
}

/// Drives one or more memory cells alongside [`crate::lstm::stack_forward`].
pub struct NrnmInjector<'a> {
    cfg: &'a NrnmConfig,
    input: SeqInput<'a>,
    cells: Vec<CellRuntime>,
    traces: Option<Vec<BlockTrace>>,
    updates: usize,
}

impl<'a> NrnmInjector<'a> {
    pub fn new<T: Real>(
        g: &mut Graph<T>,
        cfg: &'a NrnmConfig,
        input: SeqInput<'a>,
        cells: Vec<(usize, BoundNrnm)>,
        record_traces: bool,
    ) -> Self {
        let cells = cells
            .into_iter()
            .map(|(layer, params)| CellRuntime {
                layer,
                params,
                hidden: Vec::with_capacity(input.steps),
                memory: MemoryState::initial(g, input.batch, cfg),
                readout: None,
                x_proj: None,
            })
            .collect();
        NrnmInjector {
            cfg,
            input,
            cells,
            traces: record_traces.then(Vec::new),
            updates: 0,
        }
    }

    pub fn take_traces(&mut self) -> Vec<BlockTrace> {
        self.traces.take().unwrap_or_default()
    }

    /// Memory updates performed so far, summed over cells.
    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn memory(&self, layer: usize) -> Option<&MemoryState> {
        self.cells.iter().find(|c| c.layer == layer).map(|c| &c.memory)
    }
}

impl<T: Real> Injector<T> for NrnmInjector<'_> {
    fn validate(&self, depth: usize) -> Result<()> {
        for c in &self.cells {
            if c.layer >= depth {
                return Err(Error::config(
                    "inject_layer",
                    format!("layer {} is outside a stack of depth {depth}", c.layer),
                ));
            }
        }
        Ok(())
    }

    fn contribution(&mut self, g: &mut Graph<T>, step: usize, layer: usize) -> Result<Option<Var>> {
        let input = self.input;
        let Some(cell) = self.cells.iter_mut().find(|c| c.layer == layer) else {
            return Ok(None);
        };
        let Some(readout) = cell.readout else {
            return Ok(None);
        };
        let x_proj = match cell.x_proj {
            Some(v) => v,
            None => {
                let v = g.matmul(input.x, cell.params.w_m)?;
                cell.x_proj = Some(v);
                v
            }
        };
        let rows = g.gather_rows(x_proj, &input.step_rows(step))?;
        gated_contribution(g, rows, &readout).map(Some)
    }

    fn observe(&mut self, g: &mut Graph<T>, step: usize, layer: usize, h: Var) -> Result<()> {
        let cfg = self.cfg;
        let input = self.input;
        let Some(ci) = self.cells.iter().position(|c| c.layer == layer) else {
            return Ok(());
        };
        let cell = &mut self.cells[ci];
        cell.hidden.push(h);
        if !cfg.is_block_end(step) {
            return Ok(());
        }
        let block = assemble_block(g, &cell.hidden, &input, step, cfg, &cell.params)?;
        let emb = memory_embedding(g, block.source, input.batch, cfg, &cell.params)?;
        let memory = update_memory(g, emb.m_tilde, &cell.memory, block.inputs, step, &cell.params)?;
        cell.memory = memory;
        cell.readout = Some(memory_readout(g, &memory, &cell.params)?);
        self.updates += 1;
        if let Some(traces) = &mut self.traces {
            let n = 2 * cfg.units();
            let mem = g.value(memory.m).to_f64_vec();
            let width = cfg.units() * cfg.m;
            let heads: Vec<Vec<f64>> = emb.attention.iter().map(|&w| g.value(w).to_f64_vec()).collect();
            for b in 0..input.batch {
                traces.push(BlockTrace {
                    step,
                    layer,
                    sequence: b,
                    units: n,
                    heads: heads.iter().map(|w| w[b * n * n..(b + 1) * n * n].to_vec()).collect(),
                    memory: mem[b * width..(b + 1) * width].to_vec(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, s: usize, win: usize) -> NrnmConfig {
        NrnmConfig::new(k, s, win, 4, 1, 0)
    }

    #[test]
    fn config_validation() {
        assert!(cfg(4, 1, 4).validate().is_ok());
        assert!(cfg(4, 0, 4).validate().is_err());
        assert!(cfg(4, 5, 4).validate().is_err());
        assert!(cfg(4, 1, 0).validate().is_err());
        assert!(NrnmConfig::new(4, 1, 1, 6, 4, 0).validate().is_err());
        assert_eq!(cfg(10, 4, 1).units(), 3);
        assert_eq!(cfg(8, 4, 1).units(), 2);
    }

    #[test]
    fn block_step_selection() {
        assert_eq!(block_steps(3, &cfg(4, 1, 1)).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(block_steps(7, &cfg(8, 4, 1)).unwrap(), vec![0, 4]);
        assert_eq!(block_steps(9, &cfg(10, 4, 1)).unwrap(), vec![0, 4, 8]);
        assert_eq!(block_steps(12, &cfg(10, 4, 1)).unwrap(), vec![3, 7, 11]);
        assert!(block_steps(2, &cfg(4, 1, 1)).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(memory_schedule(20, &cfg(8, 1, 4)), vec![7, 11, 15, 19]);
        assert!(memory_schedule(7, &cfg(8, 1, 4)).is_empty());
        assert_eq!(memory_schedule(8, &cfg(8, 1, 4)), vec![7]);
    }

    #[test]
    fn schedule_and_provider_agree_by_enumeration() {
        let c = cfg(8, 1, 8);
        let ends = memory_schedule(100, &c);
        assert_eq!(ends.len(), 12);
        for t in 0..100 {
            let expected = ends.iter().copied().filter(|&e| e < t).max();
            assert_eq!(memory_provider(t, &c), expected, "step {t}");
        }
        for (i, &e) in ends.iter().enumerate() {
            let served = (0..100).filter(|&t| memory_provider(t, &c) == Some(e)).count();
            if i + 1 < ends.len() {
                assert_eq!(served, 8);
            } else {
                assert_eq!(served, 100 - e - 1);
            }
        }
    }

    #[test]
    fn invalid_memory_contributes_zero() {
        let c = cfg(4, 1, 4);
        let mut ps = ParamSet::<f64>::new();
        let mut rng = rand::rngs::mock::StepRng::new(1, 1);
        let p = NrnmParams::init(&mut ps, "nrnm.layer0", &c, 3, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let bp = p.bind(&mut g, &ps);
        let mem = MemoryState::initial(&mut g, 2, &c);
        assert!(g.value(mem.m).data().iter().all(|&v| v == 0.0));
        let x = g.constant(Tensor::full(vec![2, 3], 0.7));
        let out = memory_contribution(&mut g, &mem, x, &bp).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 4]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_rejects_width_mismatch() {
        let c = cfg(4, 1, 4);
        let mut ps = ParamSet::<f64>::new();
        let mut rng = rand::rngs::mock::StepRng::new(1, 1);
        assert!(NrnmParams::init(&mut ps, "nrnm", &c, 3, 8, &mut rng).is_err());
    }

    #[test]
    fn scalar_count_matches_init() {
        let c = NrnmConfig::new(10, 4, 3, 8, 2, 1);
        let mut ps = ParamSet::<f64>::new();
        let mut rng = rand::rngs::mock::StepRng::new(1, 1);
        NrnmParams::init(&mut ps, "nrnm", &c, 5, 8, &mut rng).unwrap();
        assert_eq!(ps.scalar_count(), NrnmParams::scalar_count(&c, 5));
    }
}
