use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update. Parameters are immutable tensors, so the step
/// returns fresh leaves; moment buffers mutate in place. `lr` overrides
/// `cfg.lr`, which lets a schedule drive the step size.
pub fn adamw_step(
    params: &[Tensor],
    grads: &[Tensor],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<Vec<Tensor>> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "adamw_step: {} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "adamw_step: state tracks {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }

    // Step count increments before bias correction.
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let mut out = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "adamw_step: param {i} shape {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if p.len() != state.m[i].len() {
            return Err(Error::shape(format!(
                "adamw_step: param {i} changed size since the state was created"
            )));
        }
        let mut new_data = Vec::with_capacity(p.len());
        for (j, (&pv, &gv)) in p.data().iter().zip(g.data()).enumerate() {
            let m = cfg.beta1 * state.m[i][j] + (1.0 - cfg.beta1) * gv;
            let v = cfg.beta2 * state.v[i][j] + (1.0 - cfg.beta2) * gv * gv;
            state.m[i][j] = m;
            state.v[i][j] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            new_data.push(pv - lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * pv));
        }
        out.push(Tensor::param(new_data, p.rows(), p.cols()));
    }
    Ok(out)
}

/// Learning-rate schedule shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear ramp 0 -> base over `warmup`, linear decay to 0 at `max_steps`.
    #[default]
    LinearDecay,
    /// Linear ramp, then flat at base.
    WarmupConstant,
}

/// Scheduled learning rate at `step` (0-based).
pub fn lr_schedule(
    schedule: Schedule,
    step: u64,
    warmup: u64,
    max_steps: u64,
    base_lr: f64,
) -> Result<f64> {
    if warmup > max_steps {
        return Err(Error::config(format!(
            "lr_schedule: warmup {warmup} exceeds max_steps {max_steps}"
        )));
    }
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    match schedule {
        Schedule::WarmupConstant => Ok(base_lr),
        Schedule::LinearDecay => {
            if step >= max_steps {
                return Ok(0.0);
            }
            let span = (max_steps - warmup) as f64;
            if span == 0.0 {
                return Ok(base_lr);
            }
            Ok(base_lr * (max_steps - step) as f64 / span)
        }
    }
}
