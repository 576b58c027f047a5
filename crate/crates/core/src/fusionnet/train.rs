use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ConvLayer, FeatureMap, FusionError, FusionMode, ParamGroup, Result, Sample, ToyModel};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOptions<T> {
    pub lr: T,
    /// Multiplies `lr` for α in adaptive mode.
    pub alpha_lr_scale: T,
    /// Groups left untouched by the update.
    pub frozen: Vec<ParamGroup>,
}

impl<T: Scalar> StepOptions<T> {
    pub fn new(lr: T) -> Self {
        Self { lr, alpha_lr_scale: T::one(), frozen: Vec::new() }
    }
}

/// One full-batch gradient descent step. Returns the loss at the
/// parameters before the update.
pub fn train_step<T: Scalar>(model: &mut ToyModel<T>, batch: &[Sample<T>], opts: &StepOptions<T>, step: usize) -> Result<T> {
    if !(opts.lr >= T::zero()) || !(opts.alpha_lr_scale >= T::zero()) {
        return Err(FusionError::Invalid(format!(
            "learning rate and alpha scale must be non-negative, got {} and {}",
            opts.lr, opts.alpha_lr_scale
        )));
    }
    let (loss, grads) = model.loss_and_grad(batch)?;
    if !loss.is_finite() {
        return Err(FusionError::Diverged { step, loss: loss.as_f64() });
    }
    apply_update(model, &grads, opts);
    Ok(loss)
}

fn apply_update<T: Scalar>(model: &mut ToyModel<T>, grads: &ToyModel<T>, opts: &StepOptions<T>) {
    let mut flat = Vec::with_capacity(grads.param_count());
    grads.visit_params(&mut |_, _, v| flat.extend_from_slice(v));
    let fixed = model.fusion.mode == FusionMode::Fixed;
    let mut i = 0;
    model.visit_params_mut(&mut |_, group, v| {
        let lr = if opts.frozen.contains(&group) || (group == ParamGroup::Fusion && fixed) {
            None
        } else if group == ParamGroup::Fusion {
            Some(opts.lr * opts.alpha_lr_scale)
        } else {
            Some(opts.lr)
        };
        if let Some(lr) = lr {
            for (p, &g) in v.iter_mut().zip(&flat[i..]) {
                *p -= lr * g;
            }
        }
        i += v.len();
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub alpha_lr_scale: f64,
    #[serde(default)]
    pub frozen: Vec<ParamGroup>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.05, steps: 60, alpha_lr_scale: 1.0, frozen: Vec::new() }
    }
}

impl TrainConfig {
    pub fn step_options<T: Scalar>(&self) -> StepOptions<T> {
        StepOptions { lr: T::lit(self.lr), alpha_lr_scale: T::lit(self.alpha_lr_scale), frozen: self.frozen.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss before each step.
    pub losses: Vec<f64>,
    /// Loss after the last step.
    pub final_loss: f64,
}

pub fn train<T: Scalar>(model: &mut ToyModel<T>, batch: &[Sample<T>], cfg: &TrainConfig) -> Result<TrainLog> {
    let opts = cfg.step_options();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let loss = train_step(model, batch, &opts, step)?;
        log::debug!("step {step}: loss {loss}");
        losses.push(loss.as_f64());
    }
    let final_loss = model.loss(batch)?;
    if !final_loss.is_finite() {
        return Err(FusionError::Diverged { step: cfg.steps, loss: final_loss.as_f64() });
    }
    Ok(TrainLog { losses, final_loss: final_loss.as_f64() })
}

/// Runs `steps` descent steps, halving the learning rate and restarting
/// from `model` until the loss sequence never increases. Returns the
/// accepted rate and the losses, including the one after the last step.
pub fn descend_with_backoff<T: Scalar>(
    model: &ToyModel<T>,
    batch: &[Sample<T>],
    steps: usize,
    opts: &StepOptions<T>,
) -> Result<(T, Vec<T>, ToyModel<T>)> {
    let mut lr = opts.lr;
    for _ in 0..40 {
        let mut m = model.clone();
        let o = StepOptions { lr, ..opts.clone() };
        let mut losses = Vec::with_capacity(steps + 1);
        let mut ok = true;
        for step in 0..steps {
            match train_step(&mut m, batch, &o, step) {
                Ok(l) => losses.push(l),
                Err(FusionError::Diverged { .. }) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if ok {
            losses.push(m.loss(batch)?);
            if losses.windows(2).all(|w| w[1] <= w[0]) {
                return Ok((lr, losses, m));
            }
        }
        lr = lr * T::lit(0.5);
    }
    Err(FusionError::Invalid("no learning rate gave monotone descent".into()))
}

/// A differentiable objective with flat parameter access; what
/// [`grad_check`] needs.
pub trait GradCheckable<T: Scalar>: Clone + Send + Sync {
    type Input: Sync + ?Sized;
    fn objective(&self, input: &Self::Input) -> Result<T>;
    /// Analytic gradient in flat parameter order.
    fn gradient(&self, input: &Self::Input) -> Result<Vec<T>>;
    fn param_count(&self) -> usize;
    fn param_path(&self, index: usize) -> String;
    fn set_param(&mut self, index: usize, value: T);
    fn param(&self, index: usize) -> T;
}

impl<T: Scalar> GradCheckable<T> for ToyModel<T> {
    type Input = [Sample<T>];

    fn objective(&self, input: &[Sample<T>]) -> Result<T> {
        self.loss(input)
    }

    fn gradient(&self, input: &[Sample<T>]) -> Result<Vec<T>> {
        let (_, g) = self.loss_and_grad(input)?;
        let mut flat = Vec::with_capacity(g.param_count());
        g.visit_params(&mut |_, _, v| flat.extend_from_slice(v));
        Ok(flat)
    }

    fn param_count(&self) -> usize {
        ToyModel::param_count(self)
    }

    fn param_path(&self, index: usize) -> String {
        let mut base = 0;
        let mut out = String::new();
        self.visit_params(&mut |name, _, v| {
            if out.is_empty() && index < base + v.len() {
                out = format!("{name}[{}]", index - base);
            }
            base += v.len();
        });
        out
    }

    fn set_param(&mut self, index: usize, value: T) {
        let mut base = 0;
        self.visit_params_mut(&mut |_, _, v| {
            if (base..base + v.len()).contains(&index) {
                v[index - base] = value;
            }
            base += v.len();
        });
    }

    fn param(&self, index: usize) -> T {
        let mut base = 0;
        let mut out = T::zero();
        self.visit_params(&mut |_, _, v| {
            if (base..base + v.len()).contains(&index) {
                out = v[index - base];
            }
            base += v.len();
        });
        out
    }
}

/// Linear probe `⟨conv(x), y⟩` over a single layer.
impl<T: Scalar> GradCheckable<T> for ConvLayer<T> {
    type Input = (FeatureMap<T>, FeatureMap<T>);

    fn objective(&self, (x, y): &Self::Input) -> Result<T> {
        Ok(self.forward(x)?.dot(y))
    }

    fn gradient(&self, (x, y): &Self::Input) -> Result<Vec<T>> {
        let (_, g) = self.backward(x, y)?;
        Ok([g.weight, g.bias].concat())
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn param_path(&self, index: usize) -> String {
        if index < self.weight.len() {
            format!("weight[{index}]")
        } else {
            format!("bias[{}]", index - self.weight.len())
        }
    }

    fn set_param(&mut self, index: usize, value: T) {
        let n = self.weight.len();
        if index < n {
            self.weight[index] = value;
        } else {
            self.bias[index - n] = value;
        }
    }

    fn param(&self, index: usize) -> T {
        let n = self.weight.len();
        if index < n {
            self.weight[index]
        } else {
            self.bias[index - n]
        }
    }
}

/// Denominator floor for relative errors. Central differences in double
/// precision carry roughly 1e-11 absolute rounding error at the default
/// step, so gradients far below this floor are judged by absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

pub const DEFAULT_GRAD_CHECK_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Central differences over every parameter, compared with the analytic
/// gradient.
pub fn grad_check<T: Scalar, M: GradCheckable<T>>(model: &M, input: &M::Input, epsilon: f64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(FusionError::Invalid(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let analytic = model.gradient(input)?;
    let n = model.param_count();
    let eps = T::lit(epsilon);
    let chunk = n.div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
    let numeric: Vec<Vec<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|idx| {
            let mut m = model.clone();
            idx.iter()
                .map(|&i| {
                    let p = m.param(i);
                    m.set_param(i, p + eps);
                    let up = m.objective(input)?;
                    m.set_param(i, p - eps);
                    let down = m.objective(input)?;
                    m.set_param(i, p);
                    Ok(((up - down) / (T::lit(2.0) * eps)).as_f64())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_path: String::new(), analytic: 0.0, numeric: 0.0, checked: n };
    for (i, num) in numeric.concat().into_iter().enumerate() {
        let a = analytic[i].as_f64();
        let e = relative_error(a, num);
        if !(e <= report.max_rel_error) {
            report.max_rel_error = e;
            report.worst_path = model.param_path(i);
            report.analytic = a;
            report.numeric = num;
        }
    }
    Ok(report)
}
