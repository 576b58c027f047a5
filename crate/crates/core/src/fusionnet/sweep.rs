use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::evaluate;
use super::train::{train, TrainConfig};
use super::{FusionCoefficients, FusionError, FusionMode, Result, Sample, ToyModel};
use crate::evalkit::{ApReport, OutsideBin, SizeBins, REPORT_COLUMNS};
use crate::Scalar;

/// Fixed-α grid evaluated by default.
pub const DEFAULT_SWEEP_VALUES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Converged (α45, α34) of the full-scale detector; printed for comparison
/// only, never expected from the toy model.
pub const FULL_SCALE_REFERENCE_ALPHA: [f64; 2] = [-0.231, 0.013];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub seed: u64,
    pub train: TrainConfig,
    /// Include one adaptive run initialised at α = 1.
    pub adaptive: bool,
    pub iou_threshold: f64,
    pub outside_bin: OutsideBin,
    pub bin_edges: [f64; 3],
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig::default(),
            adaptive: true,
            iou_threshold: crate::evalkit::DEFAULT_IOU_THRESHOLD,
            outside_bin: OutsideBin::Ignore,
            bin_edges: [64.0, 256.0, 1024.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub mode: FusionMode,
    pub alpha_init: f64,
    /// Values after training; equal to `alpha_init` for fixed cells.
    pub alpha45: f64,
    pub alpha34: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub report: ApReport<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<14}  {:>8}  {:>8}  {:>10}", "setting", "alpha45", "alpha34", "loss");
        for c in REPORT_COLUMNS {
            let _ = write!(out, "  {c:>10}");
        }
        out.push('\n');
        for c in &self.cells {
            let _ = write!(out, "{:<14}  {:>8.4}  {:>8.4}  {:>10.6}", c.label, c.alpha45, c.alpha34, c.final_loss);
            for v in c.report.values() {
                match v {
                    Some(x) => {
                        let _ = write!(out, "  {x:>10.4}");
                    }
                    None => {
                        let _ = write!(out, "  {:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let [a, b] = FULL_SCALE_REFERENCE_ALPHA;
        let _ = writeln!(out, "full-scale reference converged alpha: alpha45 {a}, alpha34 {b} (not expected at toy scale)");
        out
    }
}

/// Trains one model per fixed α (both coefficients set to the value) plus
/// an optional adaptive run, all from the same initial weights, and
/// evaluates each on `eval_set`. Cells run in parallel; output order
/// follows `values` with the adaptive cell last.
pub fn alpha_sweep<T: Scalar>(
    values: &[f64],
    train_set: &[Sample<T>],
    eval_set: &[Sample<T>],
    cfg: &SweepConfig,
) -> Result<SweepReport> {
    if values.is_empty() && !cfg.adaptive {
        return Err(FusionError::Invalid("sweep needs at least one fixed value or the adaptive run".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(FusionError::Invalid(format!("non-finite sweep value {v}")));
    }
    let bins = SizeBins::new(cfg.bin_edges.map(T::lit)).map_err(FusionError::Invalid)?;
    let mut plan: Vec<(String, FusionCoefficients<T>)> =
        values.iter().map(|&v| (format!("fixed {v:.2}"), FusionCoefficients::fixed(T::lit(v)))).collect();
    if cfg.adaptive {
        plan.push(("adaptive".to_string(), FusionCoefficients::adaptive(T::one())));
    }
    let cells: Vec<Result<SweepCell>> = plan
        .into_par_iter()
        .map(|(label, fusion)| {
            let alpha_init = fusion.alpha45.as_f64();
            let mut model = ToyModel::new(cfg.seed, fusion);
            let log = train(&mut model, train_set, &cfg.train)?;
            let report = evaluate(&model, eval_set, &bins, T::lit(cfg.iou_threshold), cfg.outside_bin)?;
            let f = |v: Option<T>| v.map(|x| x.as_f64());
            Ok(SweepCell {
                label,
                mode: fusion.mode,
                alpha_init,
                alpha45: model.fusion.alpha45.as_f64(),
                alpha34: model.fusion.alpha34.as_f64(),
                final_loss: log.final_loss,
                losses: log.losses,
                report: ApReport {
                    ap_0_8: f(report.ap_0_8),
                    ap_8_16: f(report.ap_8_16),
                    ap_16_32: f(report.ap_16_32),
                    ap_0_32: f(report.ap_0_32),
                    overall: f(report.overall),
                },
            })
        })
        .collect();
    Ok(SweepReport { seed: cfg.seed, cells: cells.into_iter().collect::<Result<_>>()? })
}
