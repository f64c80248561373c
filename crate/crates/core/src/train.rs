//! Optimizers, gradient clipping, evaluation and the training loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, Mode, SequenceModel};
use crate::params::ParamSet;
use crate::tasks::{Dataset, Splits};
use crate::tensor::Real;

pub const METRICS_HEADER: &str = "epoch,step,split,loss,accuracy,wall_ms,seed";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer `{other}` (expected adam or sgd)")),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    /// Drives shuffling and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(5.0),
            epochs: 10,
            batch_size: 32,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("eps", "must be positive"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("clip", format!("clip norm must be positive, got {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch", "batch size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one slot per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

fn check_grads<T: Real>(params: &ParamSet<T>) -> Result<()> {
    for (_, p) in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite {
                stage: format!("gradient of `{}`", p.name),
            });
        }
    }
    Ok(())
}

/// One bias-corrected Adam update using the gradients stored in `params`.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, state: &mut AdamState<T>, cfg: &TrainConfig) -> Result<()> {
    check_grads(params)?;
    if state.m.len() != params.len() {
        return Err(Error::Usage(format!(
            "optimizer state holds {} slots for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let (b1t, b2t, lr, eps) = (T::lit(b1), T::lit(b2), T::lit(cfg.lr), T::lit(cfg.eps));
    let (c1t, c2t) = (T::lit(c1), T::lit(c2));
    let one = T::one();
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.data();
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1t * *mi + (one - b1t) * g;
            *vi = b2t * *vi + (one - b2t) * g * g;
            let m_hat = *mi / c1t;
            let v_hat = *vi / c2t;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step<T: Real>(params: &mut ParamSet<T>, lr: f64) -> Result<()> {
    check_grads(params)?;
    let lr = T::lit(lr);
    for p in params.iter_mut() {
        let grad = p.grad.data();
        for (w, &g) in p.value.data_mut().iter_mut().zip(grad) {
            *w = *w - lr * g;
        }
    }
    Ok(())
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Real>(params: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = T::lit(max_norm / norm);
        for p in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g = *g * factor;
            }
        }
    }
    norm
}

pub struct Optimizer<T> {
    cfg: TrainConfig,
    adam: AdamState<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: &TrainConfig, params: &ParamSet<T>) -> Self {
        Optimizer {
            cfg: cfg.clone(),
            adam: AdamState::new(params),
        }
    }

    /// Clip (if configured) and apply the stored gradients, then zero them.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        check_grads(params)?;
        if let Some(c) = self.cfg.clip {
            clip_gradients(params, c);
        }
        match self.cfg.optimizer {
            OptimizerKind::Adam => adam_step(params, &mut self.adam, &self.cfg)?,
            OptimizerKind::Sgd => sgd_step(params, self.cfg.lr)?,
        }
        params.zero_grad();
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Sample-weighted mean cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

pub fn evaluate<T: Real>(model: &SequenceModel<T>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let mut total = 0.0;
    let mut correct = 0usize;
    for batch in data.all::<T>(batch_size)? {
        let (loss, logits) = model.loss(&batch, Mode::Eval)?;
        total += loss * batch.len() as f64;
        correct += predict(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    let n = data.len();
    Ok(if n == 0 {
        Evaluation {
            loss: f64::NAN,
            accuracy: f64::NAN,
            count: 0,
        }
    } else {
        Evaluation {
            loss: total / n as f64,
            accuracy: correct as f64 / n as f64,
            count: n,
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_ms: u128,
    pub seed: u64,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.8},{:.6},{},{}",
            self.epoch, self.step, self.split, self.loss, self.accuracy, self.wall_ms, self.seed
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub history: Vec<MetricRow>,
    /// Parameters with the best validation accuracy (initialization when no
    /// epoch ran).
    pub best: ParamSet<T>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test: Option<Evaluation>,
    pub steps: usize,
}

fn mix(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn write_row(out: &mut dyn Write, row: &MetricRow) -> Result<()> {
    writeln!(out, "{}", row.to_csv()).map_err(|e| Error::io("metrics", e))
}

/// Train `model` on `splits.train`, validating on `splits.val` and scoring the
/// best parameters on `splits.test`. Metric rows are streamed to `metrics`
/// (header first). On return the model holds the final parameters; on
/// divergence it holds the last finite ones.
pub fn train<T: Real>(
    model: &mut SequenceModel<T>,
    cfg: &TrainConfig,
    splits: &Splits,
    metrics: &mut dyn Write,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if splits.train.is_empty() && cfg.epochs > 0 {
        return Err(Error::config("n_train", "training set is empty"));
    }
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io("metrics", e))?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg, model.params());
    model.params_mut().zero_grad();
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut history = Vec::new();
    let mut best = model.params().clone();
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch = splits.train.batch::<T>(idx)?;
            let mode = Mode::Train {
                dropout_seed: mix(cfg.seed, step as u64),
            };
            let diverged = |reason: String| Error::Divergence { epoch, step, reason };
            let (loss, logits) = match model.loss_and_grad(&batch, mode) {
                Ok(v) => v,
                Err(Error::NonFinite { stage }) => {
                    model.params_mut().zero_grad();
                    return Err(diverged(format!("non-finite value in {stage}")));
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                model.params_mut().zero_grad();
                return Err(diverged(format!("loss is {loss}")));
            }
            if let Err(Error::NonFinite { stage }) = opt.step(model.params_mut()) {
                model.params_mut().zero_grad();
                return Err(diverged(format!("non-finite {stage}")));
            }
            step += 1;
            loss_sum += loss * idx.len() as f64;
            correct += predict(&logits).iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        }
        let n = splits.train.len() as f64;
        let row = MetricRow {
            epoch,
            step,
            split: "train".into(),
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
            wall_ms: start.elapsed().as_millis(),
            seed: cfg.seed,
        };
        write_row(metrics, &row)?;
        log::info!("epoch {epoch}: train loss {:.4} acc {:.4}", row.loss, row.accuracy);
        history.push(row);

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let (split, ev) = if splits.val.is_empty() {
                ("train", evaluate(model, &splits.train, cfg.batch_size)?)
            } else {
                ("val", evaluate(model, &splits.val, cfg.batch_size)?)
            };
            if split == "val" {
                let row = MetricRow {
                    epoch,
                    step,
                    split: "val".into(),
                    loss: ev.loss,
                    accuracy: ev.accuracy,
                    wall_ms: start.elapsed().as_millis(),
                    seed: cfg.seed,
                };
                write_row(metrics, &row)?;
                log::info!("epoch {epoch}: val loss {:.4} acc {:.4}", row.loss, row.accuracy);
                history.push(row);
            }
            if ev.accuracy > best_acc {
                best_acc = ev.accuracy;
                best_epoch = epoch;
                best = model.params().clone();
            }
        }
    }

    let test = if cfg.epochs > 0 && !splits.test.is_empty() {
        let mut scorer = model.clone();
        scorer.load_params(&best)?;
        let ev = evaluate(&scorer, &splits.test, cfg.batch_size)?;
        let row = MetricRow {
            epoch: best_epoch,
            step,
            split: "test".into(),
            loss: ev.loss,
            accuracy: ev.accuracy,
            wall_ms: start.elapsed().as_millis(),
            seed: cfg.seed,
        };
        write_row(metrics, &row)?;
        history.push(row);
        Some(ev)
    } else {
        None
    };
    metrics.flush().map_err(|e| Error::io("metrics", e))?;
    Ok(TrainReport {
        history,
        best,
        best_epoch,
        best_val_accuracy: if best_acc.is_finite() { best_acc } else { f64::NAN },
        test,
        steps: step,
    })
}

/// Metrics text with the `wall_ms` column blanked, for reproducibility checks.
pub fn strip_wall_time(metrics: &str) -> String {
    let wall = METRICS_HEADER.split(',').position(|c| c == "wall_ms").unwrap_or(5);
    metrics
        .lines()
        .map(|line| {
            line.split(',')
                .enumerate()
                .map(|(i, f)| if i == wall { "" } else { f })
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
