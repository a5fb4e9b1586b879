use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    accuracy_matrix, disagreement_matrix, mean_gradient_mi, spearman_grad_corr, underspec_report, BestModelMatrix,
    SpearmanSummary, UnderspecReport,
};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::training::ModelSet;

/// Everything [`build_report`] evaluates.
pub struct ReportInputs<'a> {
    pub set: &'a ModelSet,
    pub train: &'a Batch,
    pub val: &'a Batch,
    pub pool: &'a Tensor,
    pub test_sets: &'a [Batch],
    pub test_names: Vec<String>,
    /// Points at which gradient diagnostics are computed.
    pub diagnostic_sample: &'a Tensor,
    pub eps_tr: f64,
    pub eps_val: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_sets: Vec<String>,
    /// `[model][test set]`
    pub accuracy: Vec<Vec<f64>>,
    pub best_models: BestModelMatrix,
    /// Mean diagonal minus mean off-diagonal entry of the best-model matrix.
    pub specialization_gap: Option<f64>,
    /// `[model][model]` on the OOD pool.
    pub disagreement: Vec<Vec<f64>>,
    pub underspecification: UnderspecReport,
    pub mean_gradient_mi: Option<f64>,
    pub gradient_rank_correlation: Option<SpearmanSummary>,
}

pub fn build_report(inp: &ReportInputs<'_>) -> Result<EvalReport> {
    if inp.test_names.len() != inp.test_sets.len() {
        return Err(Error::shape("test set names", inp.test_sets.len(), inp.test_names.len()));
    }
    let accuracy = accuracy_matrix(inp.set, inp.test_sets)?;
    let best_models = BestModelMatrix::from_accuracy(&accuracy)?;
    let specialization_gap = best_models.off_diagonal_mean().map(|o| best_models.diagonal_mean() - o);
    let underspecification = underspec_report(
        inp.set,
        inp.train,
        inp.val,
        inp.pool,
        inp.eps_tr,
        inp.eps_val,
        inp.delta,
    )?;
    let gradient_rank_correlation = if inp.set.len() >= 2 && inp.diagnostic_sample.rows() > 0 {
        Some(spearman_grad_corr(inp.set, inp.diagnostic_sample)?)
    } else {
        None
    };
    Ok(EvalReport {
        test_sets: inp.test_names.clone(),
        accuracy,
        best_models,
        specialization_gap,
        disagreement: disagreement_matrix(inp.set, inp.pool)?,
        underspecification,
        mean_gradient_mi: mean_gradient_mi(inp.set, inp.diagnostic_sample)?,
        gradient_rank_correlation,
    })
}

fn table(out: &mut String, header: &[String], rows: &[(String, Vec<String>)]) {
    let n = header.len();
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    for (_, cells) in rows {
        for (w, c) in widths.iter_mut().zip(cells) {
            *w = (*w).max(c.len());
        }
    }
    let _ = write!(out, "{:label_w$}", "");
    for j in 0..n {
        let _ = write!(out, "  {:>w$}", header[j], w = widths[j]);
    }
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{label:label_w$}");
        for j in 0..n {
            let _ = write!(out, "  {:>w$}", cells[j], w = widths[j]);
        }
        out.push('\n');
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

impl EvalReport {
    /// Aligned-column text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("Accuracy (%) per model and test set\n");
        let rows: Vec<(String, Vec<String>)> = self
            .accuracy
            .iter()
            .enumerate()
            .map(|(m, r)| (format!("model {m}"), r.iter().map(|&v| pct(v)).collect()))
            .collect();
        table(&mut out, &self.test_sets, &rows);

        out.push_str("\nBest model per test set (rows) on every test set (columns)\n");
        let rows: Vec<(String, Vec<String>)> = self
            .best_models
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                (
                    format!("{} -> model {}", self.test_sets[r], self.best_models.best[r]),
                    row.iter().map(|&v| pct(v)).collect(),
                )
            })
            .collect();
        table(&mut out, &self.test_sets, &rows);
        let _ = writeln!(
            out,
            "specialization gap (diagonal - off-diagonal): {}",
            opt(self.specialization_gap.map(|g| 100.0 * g), 1)
        );

        out.push_str("\nOOD disagreement (%)\n");
        let header: Vec<String> = (0..self.disagreement.len()).map(|m| format!("m{m}")).collect();
        let rows: Vec<(String, Vec<String>)> = self
            .disagreement
            .iter()
            .enumerate()
            .map(|(m, r)| (format!("m{m}"), r.iter().map(|&v| pct(v)).collect()))
            .collect();
        table(&mut out, &header, &rows);

        let u = &self.underspecification;
        out.push_str("\nUnderspecification\n");
        let _ = writeln!(
            out,
            "converged models (train < {}, val < {}): {} {:?}",
            u.eps_tr, u.eps_val, u.n_converged, u.converged
        );
        let _ = writeln!(
            out,
            "pairwise disagreement among converged: min {} mean {} (distinct at {}: {})",
            opt(u.min_disagreement, 4),
            opt(u.mean_disagreement, 4),
            u.delta,
            if u.distinct { "yes" } else { "no" }
        );
        let _ = writeln!(out, "mean gradient mutual information: {}", opt(self.mean_gradient_mi, 4));
        match &self.gradient_rank_correlation {
            Some(s) => {
                let _ = writeln!(
                    out,
                    "mean gradient rank correlation: {} ({} comparisons, {} skipped)",
                    opt(s.mean, 4),
                    s.used,
                    s.skipped
                );
            }
            None => out.push_str("mean gradient rank correlation: -\n"),
        }
        out
    }
}
