//! Pretrain on simulated data, finetune on real data, and measure the
//! 0-1 error gap between the two domains.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::{ApReport, OutsideBin, SizeBins, REPORT_COLUMNS};
use crate::fusionnet::{
    evaluate, train, Checkpoint, FusionCoefficients, FusionError, FusionMode, ParamGroup, Sample, ToyModel,
    TrainConfig, TrainLog,
};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransferError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{stage} stage failed: {source}")]
    Stage { stage: Stage, source: FusionError },
}

pub type Result<T> = std::result::Result<T, TransferError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Simulated data.
    Source,
    /// Real-world data.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet<X, Y> {
    pub samples: Vec<(X, Y)>,
    pub domain: Domain,
}

impl<X, Y> LabeledSet<X, Y> {
    pub fn new(samples: Vec<(X, Y)>, domain: Domain) -> Self {
        Self { samples, domain }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub trait Predictor<X, Y> {
    fn predict(&self, x: &X) -> Y;
}

impl<X, Y, F: Fn(&X) -> Y> Predictor<X, Y> for F {
    fn predict(&self, x: &X) -> Y {
        self(x)
    }
}

/// Fraction of samples the predictor gets wrong.
pub fn empirical_error<T: Scalar, X, Y: PartialEq>(predictor: &impl Predictor<X, Y>, set: &LabeledSet<X, Y>) -> Result<T> {
    if set.is_empty() {
        return Err(TransferError::Invalid(format!("{:?} set is empty", set.domain)));
    }
    let wrong = set.samples.iter().filter(|(x, y)| predictor.predict(x) != *y).count();
    Ok(T::from_usize_lossy(wrong) / T::from_usize_lossy(set.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate<T> {
    pub source: T,
    pub target: T,
    /// `target - source`.
    pub gap: T,
}

pub fn generalization_gap<T: Scalar, X, Y: PartialEq>(
    predictor: &impl Predictor<X, Y>,
    source: &LabeledSet<X, Y>,
    target: &LabeledSet<X, Y>,
) -> Result<ErrorEstimate<T>> {
    let s: T = empirical_error(predictor, source)?;
    let t: T = empirical_error(predictor, target)?;
    Ok(ErrorEstimate { source: s, target: t, gap: t - s })
}

/// UAV present/absent from the strongest objectness response.
pub struct PresenceClassifier<'a, T> {
    pub model: &'a ToyModel<T>,
    pub threshold: T,
}

impl<T: Scalar> Predictor<Sample<T>, bool> for PresenceClassifier<'_, T> {
    fn predict(&self, x: &Sample<T>) -> bool {
        let Ok(t) = self.model.forward(&x.image) else { return false };
        let peak = t.outputs.iter().flat_map(|o| o.data()[..o.shape()[1] * o.shape()[2]].iter().copied()).fold(T::neg_infinity(), T::max);
        peak > self.threshold
    }
}

/// Samples labelled by whether they contain any ground truth.
pub fn presence_set<T: Scalar>(samples: &[Sample<T>], domain: Domain) -> LabeledSet<Sample<T>, bool> {
    LabeledSet::new(samples.iter().map(|s| (s.clone(), !s.gt.is_empty())).collect(), domain)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Pretrain, then finetune with the declared groups frozen.
    Tl1,
    /// Pretrain, then finetune every parameter.
    Tl2,
    /// No pretraining; train on real data only.
    Scratch,
}

impl TransferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tl1 => "TL1",
            Self::Tl2 => "TL2",
            Self::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    Evaluate,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
            Self::Evaluate => "evaluate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub label: String,
    pub mode: TransferMode,
    pub seed: u64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Groups frozen during finetuning.
    pub frozen: Vec<ParamGroup>,
    pub fusion: FusionMode,
    pub iou_threshold: f64,
    pub outside_bin: OutsideBin,
    pub bin_edges: [f64; 3],
    /// Objectness above which an image counts as containing a UAV.
    pub presence_threshold: f64,
}

impl TransferPlan {
    pub fn new(mode: TransferMode, seed: u64, pretrain: TrainConfig, finetune: TrainConfig) -> Self {
        let frozen = if mode == TransferMode::Tl1 { vec![ParamGroup::Backbone] } else { Vec::new() };
        Self {
            label: mode.as_str().to_string(),
            mode,
            seed,
            pretrain,
            finetune,
            frozen,
            fusion: FusionMode::Fixed,
            iou_threshold: crate::evalkit::DEFAULT_IOU_THRESHOLD,
            outside_bin: OutsideBin::Ignore,
            bin_edges: [64.0, 256.0, 1024.0],
            presence_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            TransferMode::Tl1 if self.frozen.is_empty() => {
                Err(TransferError::Invalid("TL1 must freeze at least one parameter group".into()))
            }
            TransferMode::Tl2 | TransferMode::Scratch if !self.frozen.is_empty() => {
                Err(TransferError::Invalid(format!("{} must not freeze parameters", self.mode.as_str())))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    pub stage: Stage,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub plan: TransferPlan,
    pub pretrain: Option<TrainLog>,
    pub finetune: TrainLog,
    pub checkpoints: Vec<StageCheckpoint>,
    pub report: ApReport<f64>,
    pub errors: ErrorEstimate<f64>,
    /// Whether every frozen array came through finetuning bit-identical.
    pub frozen_unchanged: bool,
}

/// Data for one transfer run.
pub struct TransferData<'a, T> {
    pub sim: &'a [Sample<T>],
    pub real_train: &'a [Sample<T>],
    pub real_eval: &'a [Sample<T>],
}

fn bits<T: Scalar>(model: &ToyModel<T>, groups: &[ParamGroup]) -> Vec<u64> {
    groups.iter().flat_map(|&g| model.group_values(g)).map(|v| v.as_f64().to_bits()).collect()
}

/// Pretrains (unless scratch) and finetunes a model built by `factory`,
/// then evaluates it on the real evaluation split.
pub fn run_transfer<T: Scalar>(
    plan: &TransferPlan,
    data: &TransferData<'_, T>,
    factory: impl Fn(u64, FusionCoefficients<T>) -> ToyModel<T>,
) -> Result<TransferReport> {
    plan.validate()?;
    if data.real_train.is_empty() || data.real_eval.is_empty() || (plan.mode != TransferMode::Scratch && data.sim.is_empty()) {
        return Err(TransferError::Invalid("transfer needs nonempty simulated and real data".into()));
    }
    let fusion = match plan.fusion {
        FusionMode::Fixed => FusionCoefficients::fixed(T::one()),
        FusionMode::Adaptive => FusionCoefficients::adaptive(T::one()),
    };
    let mut model = factory(plan.seed, fusion);
    let mut checkpoints = Vec::new();
    let pretrain = if plan.mode == TransferMode::Scratch {
        None
    } else {
        let log = train(&mut model, data.sim, &plan.pretrain)
            .map_err(|source| TransferError::Stage { stage: Stage::Pretrain, source })?;
        checkpoints.push(StageCheckpoint { stage: Stage::Pretrain, checkpoint: model.to_checkpoint() });
        Some(log)
    };
    let before = bits(&model, &plan.frozen);
    let ft_cfg = TrainConfig { frozen: plan.frozen.clone(), ..plan.finetune.clone() };
    let finetune = train(&mut model, data.real_train, &ft_cfg)
        .map_err(|source| TransferError::Stage { stage: Stage::Finetune, source })?;
    let frozen_unchanged = bits(&model, &plan.frozen) == before;
    checkpoints.push(StageCheckpoint { stage: Stage::Finetune, checkpoint: model.to_checkpoint() });

    let bins = SizeBins::new(plan.bin_edges.map(T::lit)).map_err(TransferError::Invalid)?;
    let report = evaluate(&model, data.real_eval, &bins, T::lit(plan.iou_threshold), plan.outside_bin)
        .map_err(|source| TransferError::Stage { stage: Stage::Evaluate, source })?;
    let classifier = PresenceClassifier { model: &model, threshold: T::lit(plan.presence_threshold) };
    let source_set = presence_set(if data.sim.is_empty() { data.real_train } else { data.sim }, Domain::Source);
    let target_set = presence_set(data.real_eval, Domain::Target);
    let errors: ErrorEstimate<f64> = generalization_gap(&classifier, &source_set, &target_set)?;
    let f = |v: Option<T>| v.map(|x| x.as_f64());
    Ok(TransferReport {
        plan: plan.clone(),
        pretrain,
        finetune,
        checkpoints,
        report: ApReport {
            ap_0_8: f(report.ap_0_8),
            ap_8_16: f(report.ap_8_16),
            ap_16_32: f(report.ap_16_32),
            ap_0_32: f(report.ap_0_32),
            overall: f(report.overall),
        },
        errors,
        frozen_unchanged,
    })
}

/// Runs independent plans concurrently; reports follow `plans` order.
pub fn run_grid<T: Scalar>(plans: &[TransferPlan], data: &TransferData<'_, T>) -> Result<Vec<TransferReport>> {
    plans.par_iter().map(|p| run_transfer(p, data, ToyModel::new)).collect()
}

/// One row per run: mode, label, AP columns and the error estimate.
pub fn grid_table(reports: &[TransferReport]) -> String {
    let name_w = reports.iter().map(|r| r.plan.label.len()).chain([5]).max().unwrap_or(5);
    let mut out = format!("{:<8}  {:<name_w$}", "mode", "label");
    for c in REPORT_COLUMNS {
        let _ = write!(out, "  {c:>10}");
    }
    let _ = writeln!(out, "  {:>8}  {:>8}  {:>8}", "err_src", "err_tgt", "gap");
    for r in reports {
        let _ = write!(out, "{:<8}  {:<name_w$}", r.plan.mode.as_str(), r.plan.label);
        for v in r.report.values() {
            match v {
                Some(x) => {
                    let _ = write!(out, "  {x:>10.4}");
                }
                None => {
                    let _ = write!(out, "  {:>10}", "-");
                }
            }
        }
        let e = r.errors;
        let _ = writeln!(out, "  {:>8.4}  {:>8.4}  {:>8.4}", e.source, e.target, e.gap);
    }
    out
}
