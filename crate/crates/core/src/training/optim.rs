//! AdamW parameter updates and learning-rate scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// AdamW moment hyperparameters. Weight decay is decoupled: it is applied to
/// the pre-update parameter value, not folded into the gradient.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Matrix,
    v: Matrix,
}

impl AdamState {
    pub fn zeros_like(param: &Matrix) -> Self {
        AdamState {
            m: Matrix::zeros(param.rows(), param.cols()),
            v: Matrix::zeros(param.rows(), param.cols()),
        }
    }
}

/// One AdamW step on a single tensor. `step_index` is 1-based and drives the
/// bias correction. Non-finite gradients refuse the update and leave both the
/// parameter and the moments untouched.
pub fn adamw_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    step_index: u64,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if step_index == 0 {
        return Err(Error::Param {
            name: "step_index",
            reason: "AdamW step index is 1-based".into(),
        });
    }
    if param.rows() != grad.rows() || param.cols() != grad.cols() {
        return Err(Error::Shape {
            op: "adamw_step",
            left_rows: param.rows(),
            left_cols: param.cols(),
            right_rows: grad.rows(),
            right_cols: grad.cols(),
        });
    }
    if grad.data().iter().any(|g| !g.is_finite()) {
        return Err(Error::BadGradient { step: step_index });
    }

    let bc1 = 1.0 - hyper.beta1.powi(step_index as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step_index as i32);
    let p = param.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let decay = lr * hyper.weight_decay * p[i];
        p[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps) + decay;
    }
    Ok(())
}

/// Learning-rate schedule shape after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    Linear,
    Cosine,
}

impl std::str::FromStr for Scheduler {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Scheduler::Linear),
            "cosine" => Ok(Scheduler::Cosine),
            other => Err(format!(
                "unknown scheduler `{other}` (expected linear|cosine)"
            )),
        }
    }
}

/// Multiplier in [0, 1]: a linear ramp from 0 to 1 over
/// `ceil(warmup_ratio * total_steps)` steps, then linear decay to 0 or
/// cosine `0.5 * (1 + cos(pi * progress))` reaching 0 at `total_steps`.
pub fn lr_multiplier(step: u64, total_steps: u64, warmup_ratio: f64, scheduler: Scheduler) -> f64 {
    assert!(total_steps >= 1, "total_steps must be positive");
    assert!(
        (0.0..1.0).contains(&warmup_ratio),
        "warmup_ratio must lie in [0, 1)"
    );
    let step = step.min(total_steps);
    let warmup = (warmup_ratio * total_steps as f64).ceil() as u64;
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return 1.0;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    match scheduler {
        Scheduler::Linear => 1.0 - progress,
        Scheduler::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    }
}
