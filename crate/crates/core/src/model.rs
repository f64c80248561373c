//! Sequence classifier: recurrent backbone (optionally with memory cells),
//! affine head on the last valid hidden state, softmax cross-entropy loss.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, OpKind, Var};
use crate::baselines::{self, BaselineKind, BaselineLayerParams};
use crate::error::{Error, Result};
use crate::lstm::{self, Dropout, LstmLayerParams, NoInjection, SeqInput};
use crate::memory::{BlockTrace, NrnmConfig, NrnmInjector, NrnmParams};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Precision, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lstm,
    Rnn,
    Gru,
    Horder,
    Nrnm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::Rnn => "rnn",
            ModelKind::Gru => "gru",
            ModelKind::Horder => "horder",
            ModelKind::Nrnm => "nrnm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "lstm" => ModelKind::Lstm,
            "rnn" | "vanilla_rnn" => ModelKind::Rnn,
            "gru" => ModelKind::Gru,
            "horder" | "high_order_rnn" => ModelKind::Horder,
            "nrnm" => ModelKind::Nrnm,
            other => return Err(format!("unknown model `{other}` (lstm|rnn|gru|horder|nrnm)")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub depth: usize,
    /// Hidden size of each layer.
    pub hidden: Vec<usize>,
    pub input_dim: usize,
    pub classes: usize,
    /// Memory cell settings; required for `nrnm`, ignored otherwise.
    pub nrnm: Option<NrnmConfig>,
    pub dropout: f64,
    pub precision: Precision,
    pub seed: u64,
    /// Lag count of the high-order RNN baseline.
    pub order: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, depth: usize, hidden: usize, input_dim: usize, classes: usize) -> Self {
        ModelConfig {
            kind,
            depth,
            hidden: vec![hidden; depth],
            input_dim,
            classes,
            nrnm: None,
            dropout: 0.0,
            precision: Precision::F64,
            seed: 0,
            order: 3,
        }
    }

    pub fn with_nrnm(mut self, cfg: NrnmConfig) -> Self {
        self.nrnm = Some(cfg);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth", "must be at least 1"));
        }
        if self.hidden.len() != self.depth {
            return Err(Error::config(
                "hidden",
                format!("{} sizes given for depth {}", self.hidden.len(), self.depth),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "hidden sizes must be positive"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "rate must lie in [0, 1)"));
        }
        if self.kind == ModelKind::Horder && self.order == 0 {
            return Err(Error::config("order", "high-order RNN needs order >= 1"));
        }
        if self.kind == ModelKind::Nrnm {
            let cfg = self
                .nrnm
                .as_ref()
                .ok_or_else(|| Error::config("nrnm", "nrnm model needs memory settings"))?;
            cfg.validate()?;
            for l in cfg.layers() {
                if l >= self.depth {
                    return Err(Error::config(
                        "inject_layer",
                        format!("layer {l} is outside a stack of depth {}", self.depth),
                    ));
                }
                if self.hidden[l] != cfg.m {
                    return Err(Error::config(
                        "m",
                        format!(
                            "memory width {} must equal hidden size {} of layer {l}",
                            cfg.m, self.hidden[l]
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    fn baseline_kind(&self) -> Option<BaselineKind> {
        match self.kind {
            ModelKind::Rnn => Some(BaselineKind::VanillaRnn),
            ModelKind::Gru => Some(BaselineKind::Gru),
            ModelKind::Horder => Some(BaselineKind::HighOrderRnn { order: self.order }),
            ModelKind::Lstm | ModelKind::Nrnm => None,
        }
    }

    /// Number of trainable scalars the model would have.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        let mut d_in = self.input_dim;
        for &h in &self.hidden {
            total += match self.baseline_kind() {
                Some(kind) => BaselineLayerParams::scalar_count(kind, d_in, h),
                None => LstmLayerParams::scalar_count(d_in, h),
            };
            d_in = h;
        }
        if let (ModelKind::Nrnm, Some(cfg)) = (self.kind, &self.nrnm) {
            total += cfg.layers().len() * NrnmParams::scalar_count(cfg, self.input_dim);
        }
        total + d_in * self.classes + self.classes
    }
}

/// Padded batch: `x` is `[B, T, D]`; sequence `b` is valid for steps
/// `0..lengths[b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<T> {
    pub x: Tensor<T>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

impl<T: Real> SequenceBatch<T> {
    pub fn new(x: Tensor<T>, lengths: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        let batch = SequenceBatch { x, lengths, labels };
        batch.dims()?;
        Ok(batch)
    }

    /// `(B, T, D)` after checking lengths and label count.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let (b, t, d) = self.x.dims3("sequence batch")?;
        if self.lengths.len() != b || self.labels.len() != b {
            return Err(Error::dim(
                "sequence batch",
                format!(
                    "{b} sequences but {} lengths and {} labels",
                    self.lengths.len(),
                    self.labels.len()
                ),
            ));
        }
        if let Some(&l) = self.lengths.iter().find(|&&l| l == 0 || l > t) {
            return Err(Error::dim(
                "sequence batch",
                format!("length {l} outside 1..={t}"),
            ));
        }
        Ok((b, t, d))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from a generator seeded with this value.
    Train { dropout_seed: u64 },
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    pub traces: Vec<BlockTrace>,
    pub memory_updates: usize,
}

/// Extremes observed over one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardStats {
    /// Smallest and largest entry of any sigmoid gate (LSTM, GRU, memory).
    pub gate_min: f64,
    pub gate_max: f64,
    /// Largest `|Σ_j w_ij - 1|` over every attention row of every head.
    pub attention_row_error: f64,
    pub attention_rows: usize,
}

#[derive(Clone)]
enum Backbone {
    Lstm(Vec<LstmLayerParams>),
    Baseline(Vec<BaselineLayerParams>),
}

/// Logits, block traces, memory update count and per-layer hidden states.
type FullBuild = (Var, Vec<BlockTrace>, usize, Vec<Vec<Var>>);

#[derive(Clone)]
pub struct SequenceModel<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    backbone: Backbone,
    cells: Vec<(usize, NrnmParams)>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<T: Real> SequenceModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut d_in = config.input_dim;
        let backbone = match config.baseline_kind() {
            None => {
                let mut layers = Vec::with_capacity(config.depth);
                for (l, &h) in config.hidden.iter().enumerate() {
                    layers.push(LstmLayerParams::init(
                        &mut params,
                        &format!("lstm.layer{l}"),
                        d_in,
                        h,
                        &mut rng,
                    )?);
                    d_in = h;
                }
                Backbone::Lstm(layers)
            }
            Some(kind) => {
                let mut layers = Vec::with_capacity(config.depth);
                for (l, &h) in config.hidden.iter().enumerate() {
                    layers.push(BaselineLayerParams::init(
                        &mut params,
                        &format!("{}.layer{l}", config.kind),
                        kind,
                        d_in,
                        h,
                        &mut rng,
                    )?);
                    d_in = h;
                }
                Backbone::Baseline(layers)
            }
        };
        let mut cells = Vec::new();
        if let (ModelKind::Nrnm, Some(cfg)) = (config.kind, &config.nrnm) {
            for l in cfg.layers() {
                let p = NrnmParams::init(
                    &mut params,
                    &format!("nrnm.layer{l}"),
                    cfg,
                    config.input_dim,
                    config.hidden[l],
                    &mut rng,
                )?;
                cells.push((l, p));
            }
        }
        let r = 1.0 / (d_in as f64).sqrt();
        let head_w = params.uniform("head.W", &[d_in, config.classes], r, &mut rng)?;
        let head_b = params.constant("head.b", &[config.classes], 0.0)?;
        Ok(SequenceModel {
            config,
            params,
            backbone,
            cells,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Replace all parameter values with those of a loaded checkpoint.
    pub fn load_params(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.params.assign_from(other)
    }

    /// Zero every memory read-out matrix `V_m`, which removes the memory's
    /// influence on the backbone entirely.
    pub fn zero_memory_readout(&mut self) {
        for (_, cell) in &self.cells {
            self.params.get_mut(cell.v_m).value.fill(T::zero());
        }
    }

    /// Record the forward pass into `g` and return the logits `[B, K]`.
    pub fn build(
        &self,
        g: &mut Graph<T>,
        batch: &SequenceBatch<T>,
        mode: Mode,
        record_traces: bool,
    ) -> Result<(Var, Vec<BlockTrace>, usize)> {
        let (logits, traces, updates, _) = self.build_full(g, batch, mode, record_traces)?;
        Ok((logits, traces, updates))
    }

    /// Hidden states `[B, d_h]` of every layer at every step.
    pub fn hidden_states(&self, batch: &SequenceBatch<T>, mode: Mode) -> Result<Vec<Vec<Tensor<T>>>> {
        let mut g = Graph::new();
        let (_, _, _, hidden) = self.build_full(&mut g, batch, mode, false)?;
        Ok(hidden
            .iter()
            .map(|layer| layer.iter().map(|&h| g.value(h).clone()).collect())
            .collect())
    }

    fn build_full(
        &self,
        g: &mut Graph<T>,
        batch: &SequenceBatch<T>,
        mode: Mode,
        record_traces: bool,
    ) -> Result<FullBuild> {
        let (b, t, d) = batch.dims()?;
        if d != self.config.input_dim {
            return Err(Error::dim(
                "forward",
                format!("batch has {d} features, model expects {}", self.config.input_dim),
            ));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= self.config.classes) {
            return Err(Error::dim(
                "forward",
                format!("label {bad} outside [0, {})", self.config.classes),
            ));
        }
        let x = g.constant(batch.x.reshape(vec![b * t, d])?);
        let input = SeqInput {
            x,
            batch: b,
            steps: t,
            dim: d,
            lengths: &batch.lengths,
        };
        let mut rng;
        let mut dropout = match mode {
            Mode::Train { dropout_seed } if self.config.dropout > 0.0 => {
                rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                Some(Dropout {
                    rate: self.config.dropout,
                    rng: &mut rng,
                })
            }
            _ => None,
        };
        let mut traces = Vec::new();
        let mut updates = 0;
        let out = match &self.backbone {
            Backbone::Lstm(layers) => {
                let bound = layers
                    .iter()
                    .map(|p| p.bind(g, &self.params))
                    .collect::<Result<Vec<_>>>()?;
                match (&self.config.nrnm, self.cells.is_empty()) {
                    (Some(cfg), false) => {
                        let cells = self
                            .cells
                            .iter()
                            .map(|(l, p)| (*l, p.bind(g, &self.params)))
                            .collect();
                        let mut inj = NrnmInjector::new(g, cfg, input, cells, record_traces);
                        let out = lstm::stack_forward(g, &bound, &input, &mut inj, dropout.as_mut())?;
                        traces = inj.take_traces();
                        updates = inj.updates();
                        out
                    }
                    _ => lstm::stack_forward(g, &bound, &input, &mut NoInjection, dropout.as_mut())?,
                }
            }
            Backbone::Baseline(layers) => {
                let bound = layers
                    .iter()
                    .map(|p| p.bind(g, &self.params))
                    .collect::<Result<Vec<_>>>()?;
                baselines::stack_forward(g, &bound, &input, dropout.as_mut())?
            }
        };
        let w = g.param(&self.params, self.head_w);
        let bias = g.param(&self.params, self.head_b);
        let logits = g.matmul(out.last, w)?;
        let logits = g.add_bias_row(logits, bias)?;
        Ok((logits, traces, updates, out.hidden))
    }

    pub fn forward(&self, batch: &SequenceBatch<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        self.forward_with(batch, mode, false)
    }

    pub fn forward_with(
        &self,
        batch: &SequenceBatch<T>,
        mode: Mode,
        record_traces: bool,
    ) -> Result<ForwardOutput<T>> {
        let mut g = Graph::new();
        let (logits, traces, memory_updates) = self.build(&mut g, batch, mode, record_traces)?;
        let logits = g.value(logits).clone();
        let probs = crate::tensor::softmax_rows(&logits)?;
        Ok(ForwardOutput {
            logits,
            probs,
            traces,
            memory_updates,
        })
    }

    /// Forward pass plus gate and attention extremes.
    pub fn forward_stats(&self, batch: &SequenceBatch<T>, mode: Mode) -> Result<(ForwardOutput<T>, ForwardStats)> {
        let mut g = Graph::new();
        let (logits, _, memory_updates) = self.build(&mut g, batch, mode, false)?;
        let mut stats = ForwardStats {
            gate_min: f64::INFINITY,
            gate_max: f64::NEG_INFINITY,
            attention_row_error: 0.0,
            attention_rows: 0,
        };
        for v in g.values_of(OpKind::Sigmoid) {
            for x in v.to_f64_vec() {
                stats.gate_min = stats.gate_min.min(x);
                stats.gate_max = stats.gate_max.max(x);
            }
        }
        for w in g.values_of(OpKind::SoftmaxRows) {
            let n = w.last_dim();
            for row in w.data().chunks(n) {
                let s: T = row.iter().copied().sum();
                let err = (s.to_f64().unwrap_or(f64::NAN) - 1.0).abs();
                stats.attention_row_error = stats.attention_row_error.max(err);
                stats.attention_rows += 1;
            }
        }
        let logits = g.value(logits).clone();
        let probs = crate::tensor::softmax_rows(&logits)?;
        Ok((
            ForwardOutput {
                logits,
                probs,
                traces: Vec::new(),
                memory_updates,
            },
            stats,
        ))
    }

    /// Mean cross-entropy of the batch; gradients are accumulated into the
    /// model's parameter slots. Returns the loss and the logits.
    pub fn loss_and_grad(&mut self, batch: &SequenceBatch<T>, mode: Mode) -> Result<(f64, Tensor<T>)> {
        let mut g = Graph::new();
        let (logits, _, _) = self.build(&mut g, batch, mode, false)?;
        let loss = g.cross_entropy(logits, &batch.labels)?;
        g.backward(loss, &mut self.params)?;
        let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        Ok((value, g.value(logits).clone()))
    }

    /// Mean cross-entropy of the batch without touching gradients.
    pub fn loss(&self, batch: &SequenceBatch<T>, mode: Mode) -> Result<(f64, Tensor<T>)> {
        let mut g = Graph::new();
        let (logits, _, _) = self.build(&mut g, batch, mode, false)?;
        let loss = g.cross_entropy(logits, &batch.labels)?;
        let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        Ok((value, g.value(logits).clone()))
    }

    pub fn predict(&self, batch: &SequenceBatch<T>) -> Result<Vec<usize>> {
        Ok(predict(&self.forward(batch, Mode::Eval)?.logits))
    }
}

/// `-(1/B) Σ_n ln probs[n, label_n]`, with zero probabilities clamped to the
/// smallest positive value so the result is always finite.
pub fn nll_loss<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (b, k) = probs.dims2("nll_loss")?;
    if labels.len() != b || b == 0 {
        return Err(Error::dim("nll_loss", format!("{} labels for {b} rows", labels.len())));
    }
    let mut total = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::dim("nll_loss", format!("label {y} outside [0, {k})")));
        }
        let p = probs.at2(n, y).to_f64().unwrap_or(0.0).max(f64::MIN_POSITIVE);
        total -= p.ln();
    }
    Ok(total / b as f64)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.last_dim().max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
