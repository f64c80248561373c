//! Python bindings: build and run models at f64, generate task data, and
//! drive the training harness.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nrnm::gradcheck::{check_model, GradCheckConfig};
use nrnm::harness::{self, RunConfig};
use nrnm::memory::{memory_schedule as schedule, AttentionScale};
use nrnm::tasks::{build_splits, TaskKind, TaskSpec};
use nrnm::{checkpoint, Error, Mode, ModelConfig, ModelKind, NrnmConfig, SequenceBatch, SequenceModel, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Dimension { .. } | Error::Usage(_) | Error::Parse { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(PyValueError::new_err)
}

type Sequences = Vec<Vec<Vec<f64>>>;

/// Pad ragged `[B][T_b][D]` input into a batch; lengths come from the data.
fn to_batch(x: Sequences, labels: Option<Vec<usize>>) -> PyResult<SequenceBatch<f64>> {
    let b = x.len();
    let t = x.iter().map(Vec::len).max().unwrap_or(0);
    let d = x.iter().flatten().map(Vec::len).next().unwrap_or(0);
    let mut data = vec![0.0; b * t * d];
    for (i, seq) in x.iter().enumerate() {
        for (s, frame) in seq.iter().enumerate() {
            if frame.len() != d {
                return Err(PyValueError::new_err(format!(
                    "sequence {i} step {s} has {} features, expected {d}",
                    frame.len()
                )));
            }
            data[(i * t + s) * d..(i * t + s + 1) * d].copy_from_slice(frame);
        }
    }
    let lengths = x.iter().map(Vec::len).collect();
    let labels = labels.unwrap_or_else(|| vec![0; b]);
    let x = Tensor::new(vec![b, t, d], data).map_err(py_err)?;
    SequenceBatch::new(x, lengths, labels).map_err(py_err)
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

/// A sequence classifier (NRNM, LSTM or a baseline recurrent network).
#[pyclass(name = "Model")]
struct PyModel {
    inner: SequenceModel<f64>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (kind, input_dim, classes, hidden=32, depth=1, k=8, s=1, win=4, heads=4, inject_layer=None, scale="full", order=3, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        kind: &str,
        input_dim: usize,
        classes: usize,
        hidden: usize,
        depth: usize,
        k: usize,
        s: usize,
        win: usize,
        heads: usize,
        inject_layer: Option<usize>,
        scale: &str,
        order: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let kind: ModelKind = parse(kind)?;
        let mut cfg = ModelConfig::new(kind, depth, hidden, input_dim, classes);
        cfg.seed = seed;
        cfg.order = order;
        if kind == ModelKind::Nrnm {
            let mut n = NrnmConfig::new(k, s, win, hidden, heads, inject_layer.unwrap_or(depth / 2));
            n.scale = match scale {
                "full" => AttentionScale::Full,
                "per_head" => AttentionScale::PerHead,
                other => return Err(PyValueError::new_err(format!("unknown scale `{other}` (full|per_head)"))),
            };
            cfg = cfg.with_nrnm(n);
        }
        Ok(PyModel {
            inner: SequenceModel::new(cfg).map_err(py_err)?,
        })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|(_, p)| p.name.clone()).collect()
    }

    /// `(shape, values)` of one parameter, values row-major.
    fn get_param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let p = self
            .inner
            .params()
            .by_name(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter `{name}`")))?;
        Ok((p.value.shape().to_vec(), p.value.data().to_vec()))
    }

    fn set_param(&mut self, name: &str, values: Vec<f64>) -> PyResult<()> {
        let p = self
            .inner
            .params_mut()
            .by_name_mut(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter `{name}`")))?;
        if values.len() != p.value.len() {
            return Err(PyValueError::new_err(format!(
                "`{name}` holds {} values, got {}",
                p.value.len(),
                values.len()
            )));
        }
        p.value.data_mut().copy_from_slice(&values);
        Ok(())
    }

    /// Logits `[B][K]` for a list of sequences `[B][T][D]` (lengths may differ).
    fn forward(&self, x: Sequences) -> PyResult<Vec<Vec<f64>>> {
        let batch = to_batch(x, None)?;
        let out = self.inner.forward(&batch, Mode::Eval).map_err(py_err)?;
        Ok(rows(&out.logits))
    }

    fn predict(&self, x: Sequences) -> PyResult<Vec<usize>> {
        let batch = to_batch(x, None)?;
        self.inner.predict(&batch).map_err(py_err)
    }

    /// Mean cross-entropy.
    fn loss(&self, x: Sequences, labels: Vec<usize>) -> PyResult<f64> {
        let batch = to_batch(x, Some(labels))?;
        Ok(self.inner.loss(&batch, Mode::Eval).map_err(py_err)?.0)
    }

    /// Largest relative error between recorded and finite-difference
    /// gradients, and whether it is within `tolerance`.
    #[pyo3(signature = (x, labels, tolerance=1e-4))]
    fn gradcheck(&mut self, x: Sequences, labels: Vec<usize>, tolerance: f64) -> PyResult<(f64, bool)> {
        let batch = to_batch(x, Some(labels))?;
        let cfg = GradCheckConfig {
            tolerance,
            ..GradCheckConfig::default()
        };
        let report = check_model(&mut self.inner, &batch, &cfg, None).map_err(py_err)?;
        Ok((report.max_rel_error(), report.passed()))
    }

    /// One dict per memory update: sequence, step, layer, units (`2u`),
    /// heads (row-major `2u x 2u` weights) and memory.
    fn traces<'py>(&self, py: Python<'py>, x: Sequences) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let batch = to_batch(x, None)?;
        let out = self.inner.forward_with(&batch, Mode::Eval, true).map_err(py_err)?;
        out.traces
            .into_iter()
            .map(|t| {
                let d = PyDict::new(py);
                d.set_item("sequence", t.sequence)?;
                d.set_item("step", t.step)?;
                d.set_item("layer", t.layer)?;
                d.set_item("units", t.units)?;
                d.set_item("heads", t.heads)?;
                d.set_item("memory", t.memory)?;
                Ok(d)
            })
            .collect()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, self.inner.params()).map_err(py_err)
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        let params = checkpoint::load::<f64>(&path).map_err(py_err)?;
        self.inner.load_params(&params).map_err(py_err)
    }
}

/// Block-end steps at which memory is updated for a sequence of `steps`.
#[pyfunction]
#[pyo3(signature = (steps, k, win, s=1))]
fn memory_schedule(steps: usize, k: usize, win: usize, s: usize) -> PyResult<Vec<usize>> {
    let cfg = NrnmConfig::new(k, s, win, 1, 1, 0);
    cfg.validate().map_err(py_err)?;
    Ok(schedule(steps, &cfg))
}

/// `n` training sequences of a synthetic task as `(x [n][T][D], labels)`.
#[pyfunction]
#[pyo3(signature = (task, steps, gap, n, classes=8, dim=None, motif_len=3, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate_task(
    task: &str,
    steps: usize,
    gap: usize,
    n: usize,
    classes: usize,
    dim: Option<usize>,
    motif_len: usize,
    seed: u64,
) -> PyResult<(Sequences, Vec<usize>)> {
    let spec = match parse::<TaskKind>(task)? {
        TaskKind::CopyMemory => TaskSpec::copy_memory(steps, gap, classes, dim.map_or(2, |d| d.saturating_sub(classes))),
        TaskKind::Adding => TaskSpec::adding(steps, gap),
        TaskKind::SegmentOrder => TaskSpec::segment_order(steps, gap, classes, dim.unwrap_or(6), motif_len),
        other => return Err(PyValueError::new_err(format!("`{other}` is not a synthetic task"))),
    };
    let data = build_splits(&spec.with_counts(n, 0, 0).with_seed(seed)).map_err(py_err)?.train;
    let x = data
        .samples
        .iter()
        .map(|s| (0..s.len).map(|t| s.frame(t, data.dim).to_vec()).collect())
        .collect();
    Ok((x, data.samples.iter().map(|s| s.label).collect()))
}

/// Train from a TOML configuration (same format as the command line) into
/// `out_dir`; returns the run summary as a JSON string.
#[pyfunction]
fn train(config: &str, out_dir: PathBuf) -> PyResult<String> {
    let cfg = RunConfig::parse(config, &[]).map_err(py_err)?;
    let summary = harness::run_train(&cfg, &out_dir).map_err(py_err)?;
    serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    let n = logits.len();
    let t = Tensor::new(vec![1, n], logits).map_err(py_err)?;
    Ok(nrnm::tensor::softmax_rows(&t).map_err(py_err)?.into_data())
}

#[pymodule]
fn nrnm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(memory_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
