//! Gradient descent on the exponential loss toward the max-margin direction.

use serde::{Deserialize, Serialize};

use super::{check_dim, LabeledDataset, ModelParams, NetworkError};
use crate::numkernels::{DenseMatrix, Vector};

/// How the raw gradient is scaled into a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepSchedule {
    /// `theta -= eta * grad L`.
    #[default]
    Constant,
    /// `theta -= eta * grad L / L`.
    LossNormalized,
    /// `theta -= eta * ||theta||^{2 - k} grad L / L` for a degree-`k` homogeneous
    /// model; the angular step size stays roughly constant as `||theta||` grows.
    ScaleInvariant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step: f64,
    pub max_iters: usize,
    pub schedule: StepSchedule,
    /// Step multiplier after a rejected (loss-increasing) step.
    pub backoff: f64,
    /// Give up when the step falls below this.
    pub min_step: f64,
    /// Normalized margin is compared every `stab_window` iterations.
    pub stab_window: usize,
    /// Stop when the relative change over one window is at most this.
    pub stab_tol: f64,
    /// A record is logged every `log_every` iterations (and at the end).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step: 1e-2,
            max_iters: 100_000,
            schedule: StepSchedule::Constant,
            backoff: 0.5,
            min_step: 1e-14,
            stab_window: 1000,
            stab_tol: 1e-6,
            log_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ZeroIterations,
    MarginStabilized,
    IterationBudget,
    StepUnderflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    /// `log L`, kept in log space so it never underflows.
    pub log_loss: f64,
    /// `min_i y_i Phi(theta; x_i) / ||theta||^{alpha + 1}`.
    pub normalized_margin: f64,
    pub step: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub stop: StopReason,
}

struct LossEval {
    log_loss: f64,
    /// `grad L / L`.
    rel_grad: Vector,
    min_margin: f64,
}

fn evaluate(params: &ModelParams, x: &DenseMatrix, y: &[f64]) -> LossEval {
    let (m, d) = (params.width(), params.input_dim());
    let n = x.nrows();
    let pre = x * params.w.transpose();
    let act = &params.activation;
    let margins: Vec<f64> = (0..n)
        .map(|i| y[i] * (0..m).map(|j| params.a[j] * act.eval(pre[(i, j)])).sum::<f64>())
        .collect();
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    // exp(-q_i) relative to the largest term
    let weights: Vec<f64> = margins.iter().map(|q| (min_margin - q).exp()).collect();
    let total: f64 = weights.iter().sum();
    let log_loss = -min_margin + (total / n as f64).ln();

    let coef: Vec<f64> = (0..n).map(|i| -weights[i] * y[i] / total).collect();
    let mut rel_grad = Vector::zeros(m * (d + 1));
    for j in 0..m {
        let mut ga = 0.0;
        let mut gw = Vector::zeros(d);
        for i in 0..n {
            let t = pre[(i, j)];
            ga += coef[i] * act.eval(t);
            let s = coef[i] * act.derivative(1, t);
            for k in 0..d {
                gw[k] += s * x[(i, k)];
            }
        }
        rel_grad[j] = ga;
        let aj = params.a[j];
        for k in 0..d {
            rel_grad[m + j * d + k] = aj * gw[k];
        }
    }
    LossEval {
        log_loss,
        rel_grad,
        min_margin,
    }
}

fn normalized_margin(min_margin: f64, theta_norm: f64, alpha: usize) -> f64 {
    min_margin / theta_norm.powi(alpha as i32 + 1)
}

/// Gradient descent on `L = (1/n) sum_i exp(-y_i Phi(theta; x_i))` with step
/// backoff on loss increase. Stops on margin stabilization or the iteration cap.
pub fn train_to_margin(
    dataset: &LabeledDataset,
    init: &ModelParams,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog), NetworkError> {
    check_dim(init.input_dim(), dataset.dim())?;
    let y = dataset.signs()?;
    let alpha = init.alpha();
    let x = &dataset.samples;
    let mut log = TrainLog {
        records: Vec::new(),
        iterations: 0,
        accepted_steps: 0,
        rejected_steps: 0,
        stop: StopReason::IterationBudget,
    };
    let mut params = init.clone();
    let mut theta = params.to_flat();
    let mut eval = evaluate(&params, x, &y);
    if !eval.log_loss.is_finite() {
        return Err(NetworkError::Diverged { iter: 0 });
    }
    let record = |iter: usize, eval: &LossEval, theta: &Vector, step: f64| TrainRecord {
        iter,
        log_loss: eval.log_loss,
        normalized_margin: normalized_margin(eval.min_margin, theta.norm(), alpha),
        step,
        grad_norm: eval.rel_grad.norm() * eval.log_loss.exp(),
    };
    if config.max_iters == 0 {
        log.stop = StopReason::ZeroIterations;
        log.records.push(record(0, &eval, &theta, config.step));
        return Ok((params, log));
    }

    let degree = alpha as i32 + 1;
    let mut step = config.step;
    let mut window_margin = normalized_margin(eval.min_margin, theta.norm(), alpha);
    let mut iter = 0;
    while iter < config.max_iters {
        iter += 1;
        let scale = match config.schedule {
            StepSchedule::Constant => eval.log_loss.exp(),
            StepSchedule::LossNormalized => 1.0,
            StepSchedule::ScaleInvariant => theta.norm().max(1e-300).powi(2 - degree),
        };
        loop {
            let cand = &theta - &eval.rel_grad * (step * scale);
            let cand_params = params.with_flat(&cand).map_err(|_| NetworkError::Diverged { iter })?;
            let cand_eval = evaluate(&cand_params, x, &y);
            if !cand_eval.log_loss.is_finite() {
                return Err(NetworkError::Diverged { iter });
            }
            if cand_eval.log_loss <= eval.log_loss {
                theta = cand;
                params = cand_params;
                eval = cand_eval;
                log.accepted_steps += 1;
                break;
            }
            log.rejected_steps += 1;
            step *= config.backoff;
            if step < config.min_step {
                log.stop = StopReason::StepUnderflow;
                log.iterations = iter;
                log.records.push(record(iter, &eval, &theta, step));
                return Ok((params, log));
            }
        }
        if config.log_every > 0 && iter % config.log_every == 0 {
            log.records.push(record(iter, &eval, &theta, step));
        }
        if config.stab_window > 0 && iter % config.stab_window == 0 {
            let current = normalized_margin(eval.min_margin, theta.norm(), alpha);
            let change = (current - window_margin).abs() / current.abs().max(f64::MIN_POSITIVE);
            if current > 0.0 && change <= config.stab_tol {
                log.stop = StopReason::MarginStabilized;
                break;
            }
            window_margin = current;
        }
    }
    log.iterations = iter;
    if log.records.last().map(|r| r.iter) != Some(iter) {
        log.records.push(record(iter, &eval, &theta, step));
    }
    Ok((params, log))
}
