//! Training one model per β and tabulating the outcome.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainError, TrainOptions, ValMetric};
use crate::datagen::PreferenceRecord;
use crate::model::Model;
use crate::numcore::Scalar;

/// `start, start + step, ..., end` with values rounded to nine decimals.
pub fn beta_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>, TrainError> {
    if !(start.is_finite() && end.is_finite() && step.is_finite()) || step <= 0.0 || end < start || start <= 0.0 {
        return Err(TrainError::InvalidConfig(format!(
            "beta grid {start}:{end}:{step} needs 0 < start <= end and step > 0"
        )));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

/// Outcome of one β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSweepRow {
    pub beta: f64,
    /// Held-out mean implicit-reward margin after the last epoch.
    pub final_margin: Option<f64>,
    pub positive_fraction: Option<f64>,
    /// Proxy faithfulness after the last epoch, when measured.
    pub faithfulness: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Validation metric of the best epoch.
    pub best_metric: Option<f64>,
    /// Set when the run failed.
    pub error: Option<String>,
    pub non_finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSweepReport {
    pub objective: String,
    /// `faithfulness` or `margin`.
    pub selection_metric: String,
    pub rows: Vec<BetaSweepRow>,
    /// β whose best epoch scored highest; ties go to the smaller β.
    pub selected_beta: Option<f64>,
}

impl BetaSweepReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// A Markdown table with one line per β.
    pub fn to_markdown(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::from("| beta | margin | positive | faithfulness | best epoch | best metric | status |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let status = match (&r.error, r.non_finite) {
                (None, _) => "ok".to_string(),
                (Some(_), true) => "non-finite".to_string(),
                (Some(e), false) => format!("error: {}", e.replace('|', "/")),
            };
            let _ = writeln!(
                out,
                "| {:.2} | {} | {} | {} | {} | {} | {} |",
                r.beta,
                cell(r.final_margin),
                cell(r.positive_fraction),
                cell(r.faithfulness),
                r.best_epoch.map_or_else(|| "-".to_string(), |e| e.to_string()),
                cell(r.best_metric),
                status
            );
        }
        if let Some(b) = self.selected_beta {
            let _ = writeln!(out, "\nselected beta: {b:.2} (by {})", self.selection_metric);
        }
        out
    }
}

/// Trains a copy of `initial` for every β in `betas`. Failures are recorded
/// per row and do not stop the sweep. With `out_dir`, each run writes its
/// checkpoints and metric log under `beta-<β>`.
pub fn sweep_beta<T: Scalar>(
    initial: &Model<T>,
    train_records: &[PreferenceRecord],
    val_records: &[PreferenceRecord],
    base: &TrainConfig,
    betas: &[f64],
    out_dir: Option<&Path>,
) -> Result<BetaSweepReport, TrainError> {
    base.validate()?;
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let cfg = TrainConfig { beta, ..base.clone() };
        let run_id = format!("beta-{beta:.2}");
        let dir = out_dir.map(|d| d.join(&run_id));
        let log = dir.as_ref().map(|d| d.join("metrics.jsonl"));
        let options = TrainOptions {
            run_id: &run_id,
            out_dir: dir.as_deref(),
            log_path: log.as_deref(),
            ..TrainOptions::default()
        };
        let row = match train(initial, train_records, val_records, &cfg, &options) {
            Ok(report) => {
                let last = report.validation.last();
                let best = report.best();
                BetaSweepRow {
                    beta,
                    final_margin: last.map(|v| v.margin),
                    positive_fraction: last.map(|v| v.positive_fraction),
                    faithfulness: last.and_then(|v| v.faithfulness),
                    best_epoch: best.map(|c| c.epoch),
                    best_metric: best.map(|c| c.metric),
                    error: None,
                    non_finite: false,
                }
            }
            Err(e) if matches!(e, TrainError::InvalidConfig(_)) => return Err(e),
            Err(e) => BetaSweepRow {
                beta,
                final_margin: None,
                positive_fraction: None,
                faithfulness: None,
                best_epoch: None,
                best_metric: None,
                non_finite: e.is_non_finite(),
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    let selected_beta = rows
        .iter()
        .filter_map(|r| r.best_metric.filter(|m| !m.is_nan()).map(|m| (r.beta, m)))
        .fold(None::<(f64, f64)>, |acc, (b, m)| match acc {
            Some((_, best)) if best >= m => acc,
            _ => Some((b, m)),
        })
        .map(|(b, _)| b);
    Ok(BetaSweepReport {
        objective: serde_json::to_value(base.objective)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        selection_metric: match base.val_metric {
            ValMetric::Faithfulness => "faithfulness",
            ValMetric::Margin => "margin",
        }
        .into(),
        rows,
        selected_beta,
    })
}
