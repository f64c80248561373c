//! Loop-based reference implementations used as independent oracles.
#![allow(dead_code)]

use nrnm::memory::NrnmConfig;
use nrnm::{ModelConfig, ModelKind, ParamSet};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-major `[rows, cols]` matrix read from a parameter.
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

pub fn mat(params: &ParamSet<f64>, name: &str) -> Mat {
    let p = params.by_name(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    let shape = p.value.shape();
    let (rows, cols) = match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => panic!("unexpected shape {other:?}"),
    };
    Mat {
        rows,
        cols,
        data: p.value.data().to_vec(),
    }
}

/// `v · M` for a row vector `v`.
pub fn vecmat(v: &[f64], m: &Mat) -> Vec<f64> {
    assert_eq!(v.len(), m.rows, "vecmat shape");
    let mut out = vec![0.0; m.cols];
    for j in 0..m.cols {
        let mut acc = 0.0;
        for i in 0..m.rows {
            acc += v[i] * m.at(i, j);
        }
        out[j] = acc;
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            let mut acc = 0.0;
            for k in 0..q {
                acc += a[i * q + k] * b[k * r + j];
            }
            out[i * r + j] = acc;
        }
    }
    out
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub struct MemoryOut {
    /// `u*m` values, row-major.
    pub memory: Vec<f64>,
    /// One `2u x 2u` matrix per head, row-major.
    pub attention: Vec<Vec<f64>>,
    pub m_tilde: Vec<f64>,
}

/// The memory cell on one block of one sequence. `hidden[j]` and `inputs[j]`
/// are the hidden state and raw input at the j-th strided step.
pub fn memory_block(
    params: &ParamSet<f64>,
    prefix: &str,
    cfg: &NrnmConfig,
    hidden: &[Vec<f64>],
    inputs: &[Vec<f64>],
    prev: &[f64],
    scale: f64,
) -> MemoryOut {
    let m = cfg.m;
    let u = hidden.len();
    let n = 2 * u;
    let p = |name: &str| mat(params, &format!("{prefix}.{name}"));
    let (px, wq, wk, wv, wo, wfc, bfc) = (p("P_x"), p("W_q"), p("W_k"), p("W_v"), p("W_o"), p("W_fc"), p("b_fc"));
    let mut c: Vec<Vec<f64>> = hidden.to_vec();
    for x in inputs {
        c.push(vecmat(x, &px));
    }
    let q: Vec<Vec<f64>> = c.iter().map(|r| vecmat(r, &wq)).collect();
    let k: Vec<Vec<f64>> = c.iter().map(|r| vecmat(r, &wk)).collect();
    let v: Vec<Vec<f64>> = c.iter().map(|r| vecmat(r, &wv)).collect();
    let dh = m / cfg.heads;
    let mut mixed = vec![vec![0.0; m]; n];
    let mut attention = Vec::new();
    for h in 0..cfg.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut weights = Vec::with_capacity(n * n);
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                .collect();
            let w = softmax(&logits);
            for c in cols.clone() {
                mixed[i][c] = (0..n).map(|j| w[j] * v[j][c]).sum();
            }
            weights.extend(w);
        }
        attention.push(weights);
    }
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let att = vecmat(&mixed[i], &wo);
        let a = add(&c[i], &att);
        let f: Vec<f64> = add(&vecmat(&a, &wfc), &bfc.data).iter().map(|x| x.tanh()).collect();
        z.push(add(&a, &f));
    }
    let m_tilde: Vec<f64> = z[..u].concat();
    let mut gate_in: Vec<f64> = inputs.concat();
    gate_in.extend_from_slice(prev);
    let gi: Vec<f64> = add(&vecmat(&gate_in, &p("W_im")), &p("B_im").data).into_iter().map(sigmoid).collect();
    let gf: Vec<f64> = add(&vecmat(&gate_in, &p("W_fm")), &p("B_fm").data).into_iter().map(sigmoid).collect();
    let memory = (0..u * m).map(|i| gi[i] * m_tilde[i].tanh() + gf[i] * prev[i]).collect();
    MemoryOut {
        memory,
        attention,
        m_tilde,
    }
}

/// `g_m ⊙ (flatten(M) V_m)` with `g_m = sigmoid(x W_m + flatten(M) U_m + b_m)`.
pub fn contribution(params: &ParamSet<f64>, prefix: &str, memory: &[f64], x: &[f64]) -> Vec<f64> {
    let p = |name: &str| mat(params, &format!("{prefix}.{name}"));
    let pre = add(&add(&vecmat(x, &p("W_m")), &vecmat(memory, &p("U_m"))), &p("b_m").data);
    let val = vecmat(memory, &p("V_m"));
    pre.iter().zip(&val).map(|(a, v)| sigmoid(*a) * v).collect()
}

fn lstm_cell(params: &ParamSet<f64>, prefix: &str, x: &[f64], h: &[f64], c: &[f64], extra: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let gate = |g: &str| {
        let w = mat(params, &format!("{prefix}.W_{g}"));
        let u = mat(params, &format!("{prefix}.U_{g}"));
        let b = mat(params, &format!("{prefix}.b_{g}"));
        add(&add(&vecmat(x, &w), &vecmat(h, &u)), &b.data)
    };
    let i: Vec<f64> = gate("i").into_iter().map(sigmoid).collect();
    let f: Vec<f64> = gate("f").into_iter().map(sigmoid).collect();
    let o: Vec<f64> = gate("o").into_iter().map(sigmoid).collect();
    let cand: Vec<f64> = gate("c").into_iter().map(f64::tanh).collect();
    let mut c2: Vec<f64> = (0..h.len()).map(|j| f[j] * c[j] + i[j] * cand[j]).collect();
    if let Some(e) = extra {
        c2 = add(&c2, e);
    }
    let h2 = (0..h.len()).map(|j| o[j] * c2[j].tanh()).collect();
    (h2, c2)
}

fn baseline_cell(params: &ParamSet<f64>, prefix: &str, kind: ModelKind, order: usize, x: &[f64], past: &[Vec<f64>]) -> Vec<f64> {
    let p = |name: &str| mat(params, &format!("{prefix}.{name}"));
    let h = past.last().unwrap();
    match kind {
        ModelKind::Rnn => add(&add(&vecmat(x, &p("W")), &vecmat(h, &p("U"))), &p("b").data)
            .into_iter()
            .map(f64::tanh)
            .collect(),
        ModelKind::Horder => {
            let mut pre = add(&vecmat(x, &p("W")), &p("b").data);
            for j in 1..=order {
                let lag = &past[past.len() - j];
                pre = add(&pre, &vecmat(lag, &p(&format!("U_{j}"))));
            }
            pre.into_iter().map(f64::tanh).collect()
        }
        ModelKind::Gru => {
            let z: Vec<f64> = add(&add(&vecmat(x, &p("W_z")), &vecmat(h, &p("U_z"))), &p("b_z").data)
                .into_iter()
                .map(sigmoid)
                .collect();
            let r: Vec<f64> = add(&add(&vecmat(x, &p("W_r")), &vecmat(h, &p("U_r"))), &p("b_r").data)
                .into_iter()
                .map(sigmoid)
                .collect();
            let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
            let n: Vec<f64> = add(&add(&vecmat(x, &p("W_n")), &vecmat(&rh, &p("U_n"))), &p("b_n").data)
                .into_iter()
                .map(f64::tanh)
                .collect();
            (0..h.len()).map(|j| (1.0 - z[j]) * n[j] + z[j] * h[j]).collect()
        }
        _ => unreachable!(),
    }
}

pub struct Rollout {
    /// `hidden[layer][t]`
    pub hidden: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<f64>,
    /// (block end, layer, memory after update, attention per head)
    pub blocks: Vec<(usize, usize, Vec<f64>, Vec<Vec<f64>>)>,
}

/// Whole-model forward pass for one sequence `x` (`len` frames of width D).
pub fn rollout(params: &ParamSet<f64>, cfg: &ModelConfig, x: &[Vec<f64>]) -> Rollout {
    let len = x.len();
    let mut layer_in: Vec<Vec<f64>> = x.to_vec();
    let mut hidden = Vec::new();
    let mut blocks = Vec::new();
    let cells: Vec<usize> = match (&cfg.nrnm, cfg.kind) {
        (Some(n), ModelKind::Nrnm) => n.layers(),
        _ => Vec::new(),
    };
    for l in 0..cfg.depth {
        let d_h = cfg.hidden[l];
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(len);
        match cfg.kind {
            ModelKind::Lstm | ModelKind::Nrnm => {
                let prefix = format!("lstm.layer{l}");
                let cell_prefix = format!("nrnm.layer{l}");
                let ncfg = cfg.nrnm.clone();
                let mut memory: Option<Vec<f64>> = None;
                let (mut h, mut c) = (vec![0.0; d_h], vec![0.0; d_h]);
                for t in 0..len {
                    let extra = match (&memory, cells.contains(&l)) {
                        (Some(mem), true) => Some(contribution(params, &cell_prefix, mem, &x[t])),
                        _ => None,
                    };
                    let (h2, c2) = lstm_cell(params, &prefix, &layer_in[t], &h, &c, extra.as_deref());
                    h = h2;
                    c = c2;
                    hs.push(h.clone());
                    if let (Some(nc), true) = (&ncfg, cells.contains(&l)) {
                        if nc.is_block_end(t) {
                            let steps: Vec<usize> = (0..nc.units()).map(|j| t + 1 - nc.k + nc.s * j).collect();
                            let hid: Vec<Vec<f64>> = steps.iter().map(|&s| hs[s].clone()).collect();
                            let inp: Vec<Vec<f64>> = steps.iter().map(|&s| x[s].clone()).collect();
                            let prev = memory.clone().unwrap_or_else(|| vec![0.0; nc.units() * nc.m]);
                            let scale = match nc.scale {
                                nrnm::memory::AttentionScale::Full => 1.0 / (nc.m as f64).sqrt(),
                                nrnm::memory::AttentionScale::PerHead => 1.0 / ((nc.m / nc.heads) as f64).sqrt(),
                            };
                            let out = memory_block(params, &cell_prefix, nc, &hid, &inp, &prev, scale);
                            blocks.push((t, l, out.memory.clone(), out.attention));
                            memory = Some(out.memory);
                        }
                    }
                }
            }
            kind => {
                let prefix = format!("{}.layer{l}", kind.as_str());
                let lags = if kind == ModelKind::Horder { cfg.order } else { 1 };
                let mut past = vec![vec![0.0; d_h]; lags];
                for t in 0..len {
                    let h = baseline_cell(params, &prefix, kind, cfg.order, &layer_in[t], &past);
                    past.push(h.clone());
                    hs.push(h);
                }
            }
        }
        layer_in = hs.clone();
        hidden.push(hs);
    }
    let last = hidden.last().unwrap().last().unwrap().clone();
    let logits = add(&vecmat(&last, &mat(params, "head.W")), &mat(params, "head.b").data);
    Rollout { hidden, logits, blocks }
}
