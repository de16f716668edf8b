//! Collected evaluation numbers for one experiment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalError, PplPoint};

/// One line of the utility grid. Cells that were not produced are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub name: String,
    /// Accounted epsilon of the generator behind this row; `None` when the
    /// row involves no private training.
    pub epsilon: Option<f64>,
    pub f1_by_task: BTreeMap<String, Option<f64>>,
    pub overall_f1: Option<f64>,
    /// MLM perplexity on held-out source notes during adaptation.
    pub perplexity_curve: Vec<PplPoint>,
    pub mia_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub tasks: Vec<String>,
    pub rows: Vec<RowResult>,
    /// Perplexity curves of corpora outside the grid, such as untrained-model
    /// babble.
    pub reference_curves: BTreeMap<String, Vec<PplPoint>>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Invalid(m));
        let curves = self
            .rows
            .iter()
            .map(|r| (&r.name, &r.perplexity_curve))
            .chain(self.reference_curves.iter());
        for (name, curve) in curves {
            for p in curve {
                if !(p.ppl > 0.0 && p.ppl.is_finite()) {
                    return bad(format!("{name}: perplexity {} at step {}", p.ppl, p.step));
                }
            }
        }
        for r in &self.rows {
            let unit = |v: &Option<f64>| v.is_none_or(|x| (0.0..=1.0).contains(&x));
            if !r.f1_by_task.values().all(unit) || !unit(&r.overall_f1) {
                return bad(format!("{}: F1 outside [0, 1]", r.name));
            }
            if !unit(&r.mia_auc) {
                return bad(format!("{}: AUC outside [0, 1]", r.name));
            }
        }
        Ok(())
    }

    /// `(row, column)` pairs with no value, in grid order.
    pub fn missing_cells(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for r in &self.rows {
            for t in &self.tasks {
                if r.f1_by_task.get(t).copied().flatten().is_none() {
                    out.push((r.name.clone(), t.clone()));
                }
            }
            if r.overall_f1.is_none() {
                out.push((r.name.clone(), "overall".into()));
            }
        }
        out
    }
}
