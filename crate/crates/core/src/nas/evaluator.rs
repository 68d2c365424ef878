use std::path::PathBuf;
use std::process::Command;

use super::space::SparsePlan;
use crate::error::{Error, Result};
use crate::ir::{save_model, ModelGraph};
use crate::runtime::{resource_eval, Budgets};

/// Scores a pruned candidate model. Training is outside this crate, so
/// implementations are surrogates or bridges to an external trainer.
pub trait AccuracyEvaluator {
    /// Accuracy-like score of `model` pruned according to `plan`; higher is
    /// better. Must be finite and deterministic for a fixed seed.
    fn evaluate(&mut self, model: &ModelGraph, plan: &SparsePlan) -> Result<f64>;

    /// Notifies the evaluator that the search would now train the current
    /// candidate for `epochs` epochs.
    fn train_hint(&mut self, epochs: u64) {
        let _ = epochs;
    }
}

/// Deterministic stand-in for trained accuracy.
///
/// The score is a log-normal bump in the effective parameter count, peaking
/// at `optimum_params`, scaled down by `sparsity_penalty * rho^2`:
///
/// `exp(-((ln p - ln p*) / width)^2 / 2) * (1 - penalty * rho^2)`
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEvaluator {
    pub optimum_params: f64,
    /// Spread of the bump in natural-log units.
    pub width: f64,
    pub sparsity_penalty: f64,
    /// Total epochs requested through [`AccuracyEvaluator::train_hint`].
    pub epochs_seen: u64,
    pub evaluations: u64,
}

impl SurrogateEvaluator {
    pub fn new(optimum_params: f64) -> Self {
        Self { optimum_params, width: 1.0, sparsity_penalty: 0.3, epochs_seen: 0, evaluations: 0 }
    }

    pub fn score(&self, effective_params: usize, sparsity: f64) -> f64 {
        let p = (effective_params.max(1) as f64).ln();
        let x = (p - self.optimum_params.max(1.0).ln()) / self.width;
        let cap = (-0.5 * x * x).exp();
        (cap * (1.0 - self.sparsity_penalty * sparsity * sparsity)).clamp(0.0, 1.0)
    }
}

impl AccuracyEvaluator for SurrogateEvaluator {
    fn evaluate(&mut self, model: &ModelGraph, plan: &SparsePlan) -> Result<f64> {
        self.evaluations += 1;
        let r = resource_eval(model, &plan.profile, &Budgets::default())?;
        Ok(self.score(r.effective_params, plan.sparsity))
    }

    fn train_hint(&mut self, epochs: u64) {
        self.epochs_seen += epochs;
    }
}

/// Any closure over `(model, plan)` is an evaluator that ignores training
/// hints.
impl<F> AccuracyEvaluator for F
where
    F: FnMut(&ModelGraph, &SparsePlan) -> Result<f64>,
{
    fn evaluate(&mut self, model: &ModelGraph, plan: &SparsePlan) -> Result<f64> {
        self(model, plan)
    }
}

/// Delegates scoring to an external program.
///
/// Each evaluation writes the candidate as a model file in a scratch
/// directory and runs `program args.. <model.toml>`. The environment carries
/// `SPARSEKIT_SPARSITY` and `SPARSEKIT_EPOCHS` (epochs hinted since the last
/// evaluation). The first whitespace-separated token of stdout is parsed as
/// the score.
#[derive(Debug, Clone)]
pub struct CommandEvaluator {
    pub program: PathBuf,
    pub args: Vec<String>,
    pending_epochs: u64,
}

impl CommandEvaluator {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self { program: program.into(), args, pending_epochs: 0 }
    }
}

impl AccuracyEvaluator for CommandEvaluator {
    fn evaluate(&mut self, model: &ModelGraph, plan: &SparsePlan) -> Result<f64> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("model.toml");
        save_model(&model.with_profile(&plan.profile), &path)?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&path)
            .env("SPARSEKIT_SPARSITY", plan.sparsity.to_string())
            .env("SPARSEKIT_EPOCHS", self.pending_epochs.to_string())
            .output()
            .map_err(|e| Error::Evaluator(format!("cannot run {}: {e}", self.program.display())))?;
        self.pending_epochs = 0;
        if !out.status.success() {
            return Err(Error::Evaluator(format!(
                "{} exited with {}: {}",
                self.program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let token = text.split_whitespace().next().unwrap_or("");
        let v: f64 = token
            .parse()
            .map_err(|_| Error::Evaluator(format!("expected a score on stdout, got `{}`", text.trim())))?;
        if !v.is_finite() {
            return Err(Error::Evaluator(format!("non-finite score {v}")));
        }
        Ok(v)
    }

    fn train_hint(&mut self, epochs: u64) {
        self.pending_epochs += epochs;
    }
}
