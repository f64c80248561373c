//! Central finite-difference verification of recorded gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::model::{Mode, SequenceBatch, SequenceModel};
use crate::params::ParamSet;

/// A scalar function of a parameter set, recorded into a fresh graph.
pub trait Objective {
    fn params(&self) -> &ParamSet<f64>;
    fn params_mut(&mut self) -> &mut ParamSet<f64>;
    fn record(&self, g: &mut Graph<f64>) -> Result<Var>;
}

/// Mean cross-entropy of a model on one batch in evaluation mode.
pub struct ModelObjective<'a> {
    pub model: &'a mut SequenceModel<f64>,
    pub batch: &'a SequenceBatch<f64>,
}

impl Objective for ModelObjective<'_> {
    fn params(&self) -> &ParamSet<f64> {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        self.model.params_mut()
    }

    fn record(&self, g: &mut Graph<f64>) -> Result<Var> {
        let (logits, _, _) = self.model.build(g, self.batch, Mode::Eval, false)?;
        g.cross_entropy(logits, &self.batch.labels)
    }
}

/// An objective given as a closure over a standalone parameter set.
pub struct FnObjective<F> {
    pub params: ParamSet<f64>,
    pub f: F,
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }

    fn record(&self, g: &mut Graph<f64>) -> Result<Var> {
        (self.f)(g, &self.params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is numerically zero are judged by absolute error.
    pub floor: f64,
    /// Check at most this many entries per parameter (chosen at random).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.params.iter().map(|p| p.name.len()).max().unwrap_or(4).max(9);
        writeln!(f, "{:<width$}  {:>7}  {:>12}  {:>12}  result", "parameter", "checked", "max_rel", "max_abs")?;
        for p in &self.params {
            writeln!(
                f,
                "{:<width$}  {:>7}  {:>12.3e}  {:>12.3e}  {}",
                p.name,
                p.checked,
                p.max_rel_error,
                p.max_abs_error,
                if p.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "{}: max relative error {:.3e} (tolerance {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance
        )
    }
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    match g.value(v).data() {
        [x] => Ok(*x),
        other => Err(Error::Usage(format!("objective must be scalar, got {} values", other.len()))),
    }
}

/// Compare recorded gradients of `obj` against central differences.
/// `corrupt` perturbs the backward rule of one op kind in the analytic pass
/// only; it exists to confirm that the check can fail.
pub fn check_gradients(
    obj: &mut dyn Objective,
    cfg: &GradCheckConfig,
    corrupt: Option<(OpKind, f64)>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    if let Some((kind, factor)) = corrupt {
        g.corrupt_backward(kind, factor);
    }
    let loss = obj.record(&mut g)?;
    scalar(&g, loss)?;
    let mut analytic = obj.params().clone();
    analytic.zero_grad();
    g.backward(loss, &mut analytic)?;
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = obj.params().iter().map(|(id, _)| id).collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let n = obj.params().get(id).value.len();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(cap) if cap < n => {
                let mut v = sample(&mut rng, n, cap).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: obj.params().get(id).name.clone(),
            checked: entries.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            passed: true,
        };
        for &i in &entries {
            let orig = obj.params().get(id).value.data()[i];
            let mut eval_at = |x: f64| -> Result<f64> {
                obj.params_mut().get_mut(id).value.data_mut()[i] = x;
                let mut g = Graph::new();
                let loss = obj.record(&mut g)?;
                scalar(&g, loss)
            };
            let plus = eval_at(orig + cfg.eps);
            let minus = eval_at(orig - cfg.eps);
            obj.params_mut().get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let exact = analytic.get(id).grad.data()[i];
            let abs = (exact - numeric).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(cfg.floor);
            if rel > check.max_rel_error || !rel.is_finite() {
                check.max_rel_error = rel;
                check.worst_index = i;
            }
            check.max_abs_error = check.max_abs_error.max(abs);
        }
        check.passed = check.max_rel_error <= cfg.tolerance;
        report.push(check);
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params: report,
    })
}

/// Gradient check of a model's loss on one batch.
pub fn check_model(
    model: &mut SequenceModel<f64>,
    batch: &SequenceBatch<f64>,
    cfg: &GradCheckConfig,
    corrupt: Option<(OpKind, f64)>,
) -> Result<GradCheckReport> {
    let mut obj = ModelObjective { model, batch };
    check_gradients(&mut obj, cfg, corrupt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic() -> FnObjective<impl Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>> {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::from_f64(vec![2, 2], &[0.3, -0.7, 1.1, 0.2]).unwrap())
            .unwrap();
        FnObjective {
            params,
            f: |g: &mut Graph<f64>, p: &ParamSet<f64>| {
                let w = g.param(p, p.id("w").unwrap());
                let t = g.tanh(w)?;
                let sq = g.mul(t, w)?;
                g.sum(sq)
            },
        }
    }

    #[test]
    fn smooth_function_passes() {
        let mut obj = quadratic();
        let report = check_gradients(&mut obj, &GradCheckConfig::default(), None).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.params[0].checked, 4);
    }

    #[test]
    fn corrupted_rule_fails_and_names_parameter() {
        let mut obj = quadratic();
        let report = check_gradients(&mut obj, &GradCheckConfig::default(), Some((OpKind::Tanh, 1.5))).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().next().unwrap().name, "w");
        assert!(report.to_string().contains("FAIL"));
    }

    #[test]
    fn values_restored_after_check() {
        let mut obj = quadratic();
        let before = obj.params.get(obj.params.id("w").unwrap()).value.clone();
        check_gradients(&mut obj, &GradCheckConfig::default(), None).unwrap();
        assert_eq!(obj.params.get(obj.params.id("w").unwrap()).value, before);
    }
}
