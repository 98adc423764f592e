use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{calibrate, CalibConfig, CalibMode};
use crate::equalize::PlacementPlan;
use crate::error::{Error, Result};
use crate::model::{perplexity_fakequant, Model, SchemeName};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: CalibMode,
    pub num_samples: usize,
    pub epochs: usize,
    pub perplexity: f64,
    pub final_loss: f64,
}

/// Calibrates once per grid entry and scores the fake-quant model on
/// `eval_tokens`. Rows come back sorted by samples, then epochs, then mode.
pub fn ablate(
    model: &Model,
    scheme: SchemeName,
    plan: &PlacementPlan,
    calib_tokens: &[u32],
    eval_tokens: &[u32],
    grid: &[CalibConfig],
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for cfg in grid {
        let (cal, report) = calibrate(model, scheme, plan, calib_tokens, cfg)?;
        let fused = cal.fused(model)?;
        let qc = cal.qconfig(model.config.n_layers);
        rows.push(AblationRow {
            mode: cfg.mode,
            num_samples: cfg.num_samples,
            epochs: cfg.epochs,
            perplexity: perplexity_fakequant(&fused, eval_tokens, &qc, &cal.params)?,
            final_loss: report.final_loss(),
        });
    }
    rows.sort_by(|a, b| (a.num_samples, a.epochs, a.mode).cmp(&(b.num_samples, b.epochs, b.mode)));
    Ok(rows)
}

/// Samples and epochs of the standard scaling grid.
pub const SCALING_GRID: [(usize, usize); 5] = [(128, 20), (128, 60), (128, 120), (256, 60), (1024, 60)];

/// Both modes at every point of [`SCALING_GRID`], other settings from `base`.
pub fn scaling_grid(base: &CalibConfig) -> Vec<CalibConfig> {
    let mut out = Vec::new();
    for (num_samples, epochs) in SCALING_GRID {
        for mode in [CalibMode::Blockwise, CalibMode::End2end] {
            out.push(CalibConfig {
                num_samples,
                epochs,
                mode,
                ..base.clone()
            });
        }
    }
    out
}

/// Aligned text table: one line per (samples, epochs), one perplexity
/// column per mode.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>8} {:>7} | {:>10} | {:>10}", "#Samples", "#Epochs", "Block-wise", "End-to-end");
    let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.num_samples, r.epochs)).collect();
    keys.dedup();
    for (s, e) in keys {
        let cell = |m: CalibMode| {
            rows.iter()
                .find(|r| r.num_samples == s && r.epochs == e && r.mode == m)
                .map_or_else(|| "-".to_string(), |r| format!("{:.3}", r.perplexity))
        };
        let _ = writeln!(
            out,
            "{s:>8} {e:>7} | {:>10} | {:>10}",
            cell(CalibMode::Blockwise),
            cell(CalibMode::End2end)
        );
    }
    out
}
