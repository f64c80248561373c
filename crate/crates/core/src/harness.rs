//! Run configuration and the experiment commands behind the CLI.
//!
//! A run is described by a TOML file with the sections `[task]`, `[model]`,
//! `[nrnm]`, `[train]` and `[run]`. Every key can also be given as a
//! `--key value` override; key names are unique across sections, so the
//! flag name alone selects the section:
//!
//! ```toml
//! [task]
//! task = "copy_memory"   # copy_memory | adding | segment_order | csv | jsonl
//! T = 60                 # sequence length
//! G = 40                 # dependency gap
//! K = 8                  # classes
//! D = 10                 # feature width (copy_memory: K + noise symbols)
//! n_train = 1000
//! data_seed = 0
//!
//! [model]
//! model = "nrnm"         # lstm | rnn | gru | horder | nrnm
//! depth = 3
//! hidden = 32            # or a list, one size per layer
//! precision = "f32"
//!
//! [nrnm]
//! k = 8
//! s = 1
//! win = 4
//!
//! [train]
//! lr = 0.001
//! epochs = 10
//! batch = 32
//! clip = 5.0             # 0 disables clipping
//!
//! [run]
//! seed = 0
//! ```
//!
//! `task` and `model` are required; everything else has a default.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gradcheck::{check_model, GradCheckConfig, GradCheckReport};
use crate::memory::{AttentionScale, NrnmConfig};
use crate::model::{Mode, ModelConfig, ModelKind, SequenceModel};
use crate::params::ParamSet;
use crate::tasks::{build_splits, Dataset, Split, Splits, TaskKind, TaskSpec};
use crate::tensor::{Precision, Real};
use crate::train::{evaluate, train, Evaluation, OptimizerKind, TrainConfig};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum HiddenSpec {
    #[default]
    Unset,
    One(usize),
    Many(Vec<usize>),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskSection {
    task: Option<String>,
    #[serde(rename = "T")]
    t: Option<usize>,
    #[serde(rename = "G")]
    g: Option<usize>,
    #[serde(rename = "K")]
    k: Option<usize>,
    #[serde(rename = "D")]
    d: Option<usize>,
    motif_len: Option<usize>,
    n_train: Option<usize>,
    n_val: Option<usize>,
    n_test: Option<usize>,
    data_seed: Option<u64>,
    path: Option<PathBuf>,
    val_path: Option<PathBuf>,
    test_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    model: Option<String>,
    depth: Option<usize>,
    #[serde(default, skip_serializing_if = "is_unset")]
    hidden: HiddenSpec,
    dropout: Option<f64>,
    precision: Option<String>,
    order: Option<usize>,
}

fn is_unset(h: &HiddenSpec) -> bool {
    *h == HiddenSpec::Unset
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NrnmSection {
    k: Option<usize>,
    s: Option<usize>,
    win: Option<usize>,
    m: Option<usize>,
    heads: Option<usize>,
    inject_layer: Option<usize>,
    scale: Option<AttentionScale>,
    extra_layers: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    optimizer: Option<String>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    clip: Option<f64>,
    epochs: Option<usize>,
    batch: Option<usize>,
    eval_every: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    task: TaskSection,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    nrnm: NrnmSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    run: RunSection,
}

/// Section of every recognised key, and whether its value stays a string.
const KEYS: &[(&str, &str, bool)] = &[
    ("task", "task", true),
    ("T", "task", false),
    ("G", "task", false),
    ("K", "task", false),
    ("D", "task", false),
    ("motif_len", "task", false),
    ("n_train", "task", false),
    ("n_val", "task", false),
    ("n_test", "task", false),
    ("data_seed", "task", false),
    ("path", "task", true),
    ("val_path", "task", true),
    ("test_path", "task", true),
    ("model", "model", true),
    ("depth", "model", false),
    ("hidden", "model", false),
    ("dropout", "model", false),
    ("precision", "model", true),
    ("order", "model", false),
    ("k", "nrnm", false),
    ("s", "nrnm", false),
    ("win", "nrnm", false),
    ("m", "nrnm", false),
    ("heads", "nrnm", false),
    ("inject_layer", "nrnm", false),
    ("scale", "nrnm", true),
    ("extra_layers", "nrnm", false),
    ("optimizer", "train", true),
    ("lr", "train", false),
    ("beta1", "train", false),
    ("beta2", "train", false),
    ("eps", "train", false),
    ("clip", "train", false),
    ("epochs", "train", false),
    ("batch", "train", false),
    ("eval_every", "train", false),
    ("seed", "run", false),
    ("out", "run", true),
];

fn override_value(key: &str, raw: &str, string: bool) -> Result<toml::Value> {
    if string {
        return Ok(toml::Value::String(raw.to_string()));
    }
    if key == "hidden" || key == "extra_layers" {
        let parts = raw
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<i64>()
                    .map(toml::Value::Integer)
                    .map_err(|_| Error::config(key, format!("`{raw}` is not a list of integers")))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(if key == "hidden" && parts.len() == 1 {
            parts.into_iter().next().expect("one element")
        } else {
            toml::Value::Array(parts)
        });
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Ok(toml::Value::Integer(i));
    }
    raw.parse::<f64>()
        .map(toml::Value::Float)
        .map_err(|_| Error::config(key, format!("`{raw}` is not a number")))
}

fn config_error(e: toml::de::Error) -> Error {
    let message = e.message().to_string();
    let field = message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".to_string());
    Error::config(field, message)
}

/// A fully resolved run: data, model, optimizer and output settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Read `path` (if any) and apply `--key value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(config_error)?;
        for (key, raw) in overrides {
            let key = key.trim_start_matches('-').replace('-', "_");
            let &(name, section, string) = KEYS
                .iter()
                .find(|(k, _, _)| *k == key)
                .ok_or_else(|| Error::config(key.clone(), "unknown option"))?;
            let value = override_value(name, raw, string)?;
            let entry = table
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => {
                    t.insert(name.to_string(), value);
                }
                _ => return Err(Error::config(section, "must be a table")),
            }
        }
        let raw: RawConfig = toml::Value::Table(table).try_into().map_err(config_error)?;
        Self::resolve(raw)
    }

    fn resolve(raw: RawConfig) -> Result<Self> {
        let task_name = raw
            .task
            .task
            .as_deref()
            .ok_or_else(|| Error::config("task", "required field is missing"))?;
        let kind: TaskKind = task_name.parse().map_err(|m: String| Error::config("task", m))?;
        let model_name = raw
            .model
            .model
            .as_deref()
            .ok_or_else(|| Error::config("model", "required field is missing"))?;
        let model_kind: ModelKind = model_name.parse().map_err(|m: String| Error::config("model", m))?;
        let ts = &raw.task;
        let mut task = match kind {
            TaskKind::CopyMemory => {
                let classes = ts.k.unwrap_or(8);
                let dim = ts.d.unwrap_or(classes + 2);
                let mut spec = TaskSpec::copy_memory(ts.t.unwrap_or(30), ts.g.unwrap_or(20), classes, 0);
                spec.dim = dim;
                spec
            }
            TaskKind::Adding => TaskSpec::adding(ts.t.unwrap_or(30), ts.g.unwrap_or(10)),
            TaskKind::SegmentOrder => TaskSpec::segment_order(
                ts.t.unwrap_or(40),
                ts.g.unwrap_or(20),
                ts.k.unwrap_or(6),
                ts.d.unwrap_or(6),
                ts.motif_len.unwrap_or(3),
            ),
            TaskKind::Csv | TaskKind::Jsonl => {
                let mut spec = TaskSpec::copy_memory(0, 0, 2, 1);
                spec.task = kind;
                spec
            }
        };
        if kind == TaskKind::Adding {
            if let Some(d) = ts.d {
                task.dim = d;
            }
            if let Some(k) = ts.k {
                task.classes = k;
            }
        }
        task.n_train = ts.n_train.unwrap_or(task.n_train);
        task.n_val = ts.n_val.unwrap_or(task.n_val);
        task.n_test = ts.n_test.unwrap_or(task.n_test);
        task.seed = ts.data_seed.unwrap_or(0);
        task.path = ts.path.clone();
        task.val_path = ts.val_path.clone();
        task.test_path = ts.test_path.clone();
        task.validate()?;

        let seed = raw.run.seed.unwrap_or(0);
        let ms = &raw.model;
        let depth = ms.depth.unwrap_or(1);
        let hidden = match &ms.hidden {
            HiddenSpec::Unset => vec![32; depth],
            HiddenSpec::One(h) => vec![*h; depth],
            HiddenSpec::Many(v) => v.clone(),
        };
        let precision = match ms.precision.as_deref() {
            None => Precision::F32,
            Some(p) => p.parse().map_err(|m: String| Error::config("precision", m))?,
        };
        // Input and class counts of external data are only known after
        // loading; `input_dim`/`classes` are filled in by `prepare`.
        let mut model = ModelConfig::new(model_kind, depth, 1, task.dim.max(1), task.classes.max(2));
        model.hidden = hidden;
        model.dropout = ms.dropout.unwrap_or(0.0);
        model.precision = precision;
        model.seed = seed;
        model.order = ms.order.unwrap_or(3);
        if model_kind == ModelKind::Nrnm {
            let ns = &raw.nrnm;
            let inject = ns.inject_layer.unwrap_or(depth / 2);
            let m = ns
                .m
                .or_else(|| model.hidden.get(inject).copied())
                .unwrap_or(32);
            let mut cfg = NrnmConfig::new(
                ns.k.unwrap_or(8),
                ns.s.unwrap_or(1),
                ns.win.unwrap_or(4),
                m,
                ns.heads.unwrap_or(4),
                inject,
            );
            cfg.scale = ns.scale.unwrap_or_default();
            cfg.extra_layers = ns.extra_layers.clone().unwrap_or_default();
            model.nrnm = Some(cfg);
        }
        model.validate()?;

        let tr = &raw.train;
        let optimizer: OptimizerKind = match tr.optimizer.as_deref() {
            None => OptimizerKind::Adam,
            Some(o) => o.parse().map_err(|m: String| Error::config("optimizer", m))?,
        };
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            optimizer,
            lr: tr.lr.unwrap_or(defaults.lr),
            beta1: tr.beta1.unwrap_or(defaults.beta1),
            beta2: tr.beta2.unwrap_or(defaults.beta2),
            eps: tr.eps.unwrap_or(defaults.eps),
            clip: match tr.clip {
                None => defaults.clip,
                Some(0.0) => None,
                Some(c) => Some(c),
            },
            epochs: tr.epochs.unwrap_or(defaults.epochs),
            batch_size: tr.batch.unwrap_or(defaults.batch_size),
            eval_every: tr.eval_every.unwrap_or(defaults.eval_every),
            seed,
        };
        train.validate()?;
        Ok(RunConfig {
            task,
            model,
            train,
            seed,
            out: raw.run.out.clone(),
        })
    }

    fn to_raw(&self) -> RawConfig {
        let t = &self.task;
        let synthetic = t.task.is_synthetic();
        let nrnm = match &self.model.nrnm {
            Some(c) if self.model.kind == ModelKind::Nrnm => NrnmSection {
                k: Some(c.k),
                s: Some(c.s),
                win: Some(c.win),
                m: Some(c.m),
                heads: Some(c.heads),
                inject_layer: Some(c.inject_layer),
                scale: Some(c.scale),
                extra_layers: Some(c.extra_layers.clone()),
            },
            _ => NrnmSection::default(),
        };
        RawConfig {
            task: TaskSection {
                task: Some(t.task.as_str().to_string()),
                t: synthetic.then_some(t.steps),
                g: synthetic.then_some(t.gap),
                k: synthetic.then_some(t.classes),
                d: synthetic.then_some(t.dim),
                motif_len: (t.task == TaskKind::SegmentOrder).then_some(t.motif_len),
                n_train: Some(t.n_train),
                n_val: Some(t.n_val),
                n_test: Some(t.n_test),
                data_seed: Some(t.seed),
                path: t.path.clone(),
                val_path: t.val_path.clone(),
                test_path: t.test_path.clone(),
            },
            model: ModelSection {
                model: Some(self.model.kind.as_str().to_string()),
                depth: Some(self.model.depth),
                hidden: HiddenSpec::Many(self.model.hidden.clone()),
                dropout: Some(self.model.dropout),
                precision: Some(self.model.precision.as_str().to_string()),
                order: Some(self.model.order),
            },
            nrnm,
            train: TrainSection {
                optimizer: Some(self.train.optimizer.to_string()),
                lr: Some(self.train.lr),
                beta1: Some(self.train.beta1),
                beta2: Some(self.train.beta2),
                eps: Some(self.train.eps),
                clip: Some(self.train.clip.unwrap_or(0.0)),
                epochs: Some(self.train.epochs),
                batch: Some(self.train.batch_size),
                eval_every: Some(self.train.eval_every),
            },
            run: RunSection {
                seed: Some(self.seed),
                out: self.out.clone(),
            },
        }
    }

    /// The resolved configuration as TOML; parsing it back yields `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_raw()).expect("run config serializes")
    }

    /// Generate or load the data, fixing the model's input and class counts
    /// to match it.
    pub fn prepare(&mut self) -> Result<Splits> {
        let splits = build_splits(&self.task)?;
        self.model.input_dim = splits.train.dim;
        self.model.classes = splits
            .train
            .classes
            .max(splits.val.classes)
            .max(splits.test.classes)
            .max(2);
        self.model.validate()?;
        Ok(splits)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub data_seed: u64,
    pub precision: Precision,
    pub parameters: usize,
    /// Files in the run directory and what they hold.
    pub layout: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub model: String,
    pub parameters: usize,
    pub epochs: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Usage(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn layout() -> BTreeMap<String, String> {
    [
        ("config.toml", "resolved configuration; rerun with --config to reproduce"),
        ("manifest.json", "version, seeds and this layout"),
        ("metrics.csv", "epoch,step,split,loss,accuracy,wall_ms,seed"),
        ("best.ckpt", "parameters with the best validation accuracy"),
        ("final.ckpt", "parameters after the last epoch"),
        ("last_finite.ckpt", "only after divergence: last finite parameters"),
        ("summary.json", "best epoch and test scores"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn train_typed<T: Real>(cfg: &RunConfig, splits: &Splits, dir: &Path) -> Result<RunSummary> {
    let mut model = SequenceModel::<T>::new(cfg.model.clone())?;
    let manifest = Manifest {
        version: VERSION.to_string(),
        seed: cfg.seed,
        data_seed: cfg.task.seed,
        precision: T::PRECISION,
        parameters: model.parameter_count(),
        layout: layout(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    let metrics_path = dir.join("metrics.csv");
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let report = match train(&mut model, &cfg.train, splits, &mut metrics) {
        Ok(r) => r,
        Err(e) => {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            if matches!(e, Error::Divergence { .. }) {
                checkpoint::save(&dir.join("last_finite.ckpt"), model.params())?;
            }
            return Err(e);
        }
    };
    drop(metrics);
    checkpoint::save(&dir.join("best.ckpt"), &report.best)?;
    checkpoint::save(&dir.join("final.ckpt"), model.params())?;
    let summary = RunSummary {
        run_dir: dir.to_path_buf(),
        model: cfg.model.kind.to_string(),
        parameters: model.parameter_count(),
        epochs: cfg.train.epochs,
        steps: report.steps,
        best_epoch: report.best_epoch,
        best_val_accuracy: finite(report.best_val_accuracy),
        test_loss: report.test.and_then(|t| finite(t.loss)),
        test_accuracy: report.test.and_then(|t| finite(t.accuracy)),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Train one run into `dir`, writing the resolved config, manifest,
/// metrics, checkpoints and summary.
pub fn run_train(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    let splits = cfg.prepare()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    log::info!(
        "training {} ({} parameters) on {} into {}",
        cfg.model.kind,
        cfg.model.parameter_count(),
        cfg.task.task,
        dir.display()
    );
    match cfg.model.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &splits, dir),
        Precision::F64 => train_typed::<f64>(&cfg, &splits, dir),
    }
}

fn split_of(splits: &Splits, split: Split) -> &Dataset {
    match split {
        Split::Train => &splits.train,
        Split::Val => &splits.val,
        Split::Test => &splits.test,
    }
}

fn load_model<T: Real>(cfg: &RunConfig, ckpt: &Path) -> Result<SequenceModel<T>> {
    let mut model = SequenceModel::<T>::new(cfg.model.clone())?;
    let params: ParamSet<T> = checkpoint::load(ckpt)?;
    model.load_params(&params)?;
    Ok(model)
}

/// Score a checkpoint on one split of the configured data.
pub fn run_eval(cfg: &RunConfig, ckpt: &Path, split: Split) -> Result<Evaluation> {
    let mut cfg = cfg.clone();
    let splits = cfg.prepare()?;
    let data = split_of(&splits, split);
    match checkpoint::stored_precision(ckpt)? {
        Precision::F32 => evaluate(&load_model::<f32>(&cfg, ckpt)?, data, cfg.train.batch_size),
        Precision::F64 => evaluate(&load_model::<f64>(&cfg, ckpt)?, data, cfg.train.batch_size),
    }
}

/// Finite-difference check of a freshly initialised model at f64 on the
/// first `batch` training sequences.
pub fn run_gradcheck(cfg: &RunConfig, gc: &GradCheckConfig, batch: usize) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.model.precision = Precision::F64;
    let splits = cfg.prepare()?;
    let n = batch.min(splits.train.len()).max(1);
    if splits.train.is_empty() {
        return Err(Error::config("n_train", "gradient check needs at least one sequence"));
    }
    let idx: Vec<usize> = (0..n).collect();
    let batch = splits.train.batch::<f64>(&idx)?;
    let mut model = SequenceModel::<f64>::new(cfg.model.clone())?;
    check_model(&mut model, &batch, gc, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    BlockK,
    WindowWin,
    InjectLayer,
    StrideS,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::BlockK => "block_k",
            Axis::WindowWin => "window_win",
            Axis::InjectLayer => "inject_layer",
            Axis::StrideS => "stride_s",
        }
    }

    /// Copy of `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: usize) -> Result<RunConfig> {
        let mut out = cfg.clone();
        let nrnm = out
            .model
            .nrnm
            .as_mut()
            .filter(|_| cfg.model.kind == ModelKind::Nrnm)
            .ok_or_else(|| Error::config("model", "ablation axes need model = \"nrnm\""))?;
        match self {
            Axis::BlockK => nrnm.k = value,
            Axis::WindowWin => nrnm.win = value,
            Axis::StrideS => nrnm.s = value,
            Axis::InjectLayer => {
                nrnm.inject_layer = value;
                if let Some(&h) = out.model.hidden.get(value) {
                    nrnm.m = h;
                }
            }
        }
        out.model.validate()?;
        Ok(out)
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "block_k" | "k" => Ok(Axis::BlockK),
            "window_win" | "win" => Ok(Axis::WindowWin),
            "inject_layer" => Ok(Axis::InjectLayer),
            "stride_s" | "s" => Ok(Axis::StrideS),
            other => Err(format!(
                "unknown axis `{other}` (block_k|window_win|inject_layer|stride_s)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: usize,
    pub seed: u64,
    /// Test accuracy of the best checkpoint; `None` if the run failed.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub runs: usize,
    pub failures: usize,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(rows: &[SweepRow], values: &[usize]) -> Vec<SweepPoint> {
    values
        .iter()
        .map(|&value| {
            let here: Vec<&SweepRow> = rows.iter().filter(|r| r.value == value).collect();
            let acc: Vec<f64> = here.iter().filter_map(|r| r.accuracy).collect();
            SweepPoint {
                value,
                median: median(&acc),
                min: acc.iter().copied().fold(f64::NAN, f64::min),
                max: acc.iter().copied().fold(f64::NAN, f64::max),
                runs: acc.len(),
                failures: here.len() - acc.len(),
            }
        })
        .collect()
}

/// One training run per (value, seed). Failed runs are recorded and the
/// sweep continues. Writes `sweep.csv` and `plot.csv` into `dir`.
pub fn run_ablate(
    base: &RunConfig,
    axis: Axis,
    values: &[usize],
    seeds: &[u64],
    dir: &Path,
) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::new();
    for &value in values {
        for &seed in seeds {
            let run_dir = dir.join(format!("{}={value}", axis.as_str())).join(format!("seed={seed}"));
            let result = axis.apply(base, value).and_then(|mut cfg| {
                cfg.set_seed(seed);
                run_train(&cfg, &run_dir)
            });
            let row = match result {
                Ok(s) => SweepRow {
                    axis: axis.as_str().into(),
                    value,
                    seed,
                    accuracy: s.test_accuracy.or(s.best_val_accuracy),
                    error: None,
                },
                Err(e) => {
                    log::warn!("{}={value} seed {seed} failed: {e}", axis.as_str());
                    SweepRow {
                        axis: axis.as_str().into(),
                        value,
                        seed,
                        accuracy: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            rows.push(row);
        }
    }
    let sweep_path = dir.join("sweep.csv");
    let mut sweep = String::from("axis,value,seed,accuracy\n");
    for r in &rows {
        let acc = r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_else(|| "NaN".into());
        sweep.push_str(&format!("{},{},{},{acc}\n", r.axis, r.value, r.seed));
    }
    fs::write(&sweep_path, sweep).map_err(|e| Error::io(&sweep_path, e))?;
    let plot_path = dir.join("plot.csv");
    let mut plot = String::from("axis,value,median,min,max,runs,failures\n");
    for p in summarize(&rows, values) {
        plot.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{},{}\n",
            axis.as_str(),
            p.value,
            p.median,
            p.min,
            p.max,
            p.runs,
            p.failures
        ));
    }
    fs::write(&plot_path, plot).map_err(|e| Error::io(&plot_path, e))?;
    let failures: Vec<String> = rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("{}={} seed={}: {e}", r.axis, r.value, r.seed)))
        .collect();
    if !failures.is_empty() {
        let path = dir.join("failures.txt");
        fs::write(&path, failures.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: String,
    pub steps: usize,
    pub k: usize,
    pub s: usize,
    pub win: usize,
    pub m: usize,
    pub heads: usize,
    pub units: usize,
    pub sequences: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sequence: usize,
    pub step: usize,
    pub layer: usize,
    /// Side of each head's square weight matrix (`2u`).
    pub size: usize,
    /// Row-major attention weights, one entry per head.
    pub heads: Vec<Vec<f64>>,
    /// Row-major `[u, m]` memory after the update.
    pub memory: Vec<f64>,
}

fn export_typed<T: Real>(cfg: &RunConfig, ckpt: Option<&Path>, data: &Dataset, batch: usize, out: &mut dyn Write) -> Result<usize> {
    let model = match ckpt {
        Some(p) => load_model::<T>(cfg, p)?,
        None => SequenceModel::<T>::new(cfg.model.clone())?,
    };
    let n = batch.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let mut traces = Vec::new();
    let mut steps = 0;
    if n > 0 {
        let b = data.batch::<T>(&idx)?;
        steps = b.dims()?.1;
        traces = model.forward_with(&b, Mode::Eval, true)?.traces;
    }
    let nrnm = cfg
        .model
        .nrnm
        .as_ref()
        .ok_or_else(|| Error::config("model", "trace export needs model = \"nrnm\""))?;
    let header = TraceHeader {
        format: "nrnm-trace".into(),
        version: VERSION.into(),
        steps,
        k: nrnm.k,
        s: nrnm.s,
        win: nrnm.win,
        m: nrnm.m,
        heads: nrnm.heads,
        units: nrnm.units(),
        sequences: n,
        blocks: traces.len(),
    };
    writeln!(out, "{}", json_line(&header)?).map_err(|e| Error::io("trace", e))?;
    for t in &traces {
        let rec = TraceRecord {
            sequence: t.sequence,
            step: t.step,
            layer: t.layer,
            size: t.units,
            heads: t.heads.clone(),
            memory: t.memory.clone(),
        };
        writeln!(out, "{}", json_line(&rec)?).map_err(|e| Error::io("trace", e))?;
    }
    out.flush().map_err(|e| Error::io("trace", e))?;
    Ok(traces.len())
}

fn json_line<S: Serialize>(value: &S) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Usage(e.to_string()))
}

/// Write a JSON-lines trace (header line, then one record per sequence and
/// block) for the first `batch` sequences of `split`. Returns the number of
/// block records.
pub fn export_traces(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    split: Split,
    batch: usize,
    out: &mut dyn Write,
) -> Result<usize> {
    let mut cfg = cfg.clone();
    if cfg.model.kind != ModelKind::Nrnm {
        return Err(Error::config("model", "trace export needs model = \"nrnm\""));
    }
    let splits = cfg.prepare()?;
    let data = split_of(&splits, split);
    let precision = match ckpt {
        Some(p) => checkpoint::stored_precision(p)?,
        None => cfg.model.precision,
    };
    match precision {
        Precision::F32 => export_typed::<f32>(&cfg, ckpt, data, batch, out),
        Precision::F64 => export_typed::<f64>(&cfg, ckpt, data, batch, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn missing_required_field_is_named() {
        let err = RunConfig::parse("[model]\nmodel = \"lstm\"\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "task"), "{err}");
        let err = RunConfig::parse("[task]\ntask = \"adding\"\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "model"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn overrides_land_in_their_sections() {
        let cfg = RunConfig::parse(
            "",
            &ov(&[
                ("task", "copy_memory"),
                ("T", "60"),
                ("G", "40"),
                ("model", "nrnm"),
                ("k", "8"),
                ("win", "4"),
                ("inject-layer", "0"),
                ("lr", "0.01"),
                ("hidden", "16"),
            ]),
        )
        .unwrap();
        assert_eq!((cfg.task.steps, cfg.task.gap), (60, 40));
        let n = cfg.model.nrnm.as_ref().unwrap();
        assert_eq!((n.k, n.win, n.inject_layer, n.m), (8, 4, 0, 16));
        assert_eq!(cfg.train.lr, 0.01);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::parse("[task]\ntask = \"adding\"\nbogus = 1\n[model]\nmodel = \"rnn\"\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "bogus"), "{err}");
        let err = RunConfig::parse("", &ov(&[("nope", "1")])).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "nope"), "{err}");
    }

    #[test]
    fn resolved_toml_round_trips() {
        let cfg = RunConfig::parse(
            "",
            &ov(&[("task", "segment_order"), ("model", "nrnm"), ("depth", "3"), ("hidden", "8"), ("clip", "0")]),
        )
        .unwrap();
        assert_eq!(cfg.train.clip, None);
        let again = RunConfig::parse(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn axis_application() {
        let cfg = RunConfig::parse("", &ov(&[("task", "adding"), ("model", "nrnm"), ("depth", "3"), ("hidden", "8")]))
            .unwrap();
        assert_eq!(Axis::BlockK.apply(&cfg, 12).unwrap().model.nrnm.unwrap().k, 12);
        assert!(Axis::InjectLayer.apply(&cfg, 3).is_err());
        assert!(Axis::StrideS.apply(&cfg, 9).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
