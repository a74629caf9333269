use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Plain (non-Nesterov) SGD with momentum and coupled L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One momentum step on a matrix parameter:
/// `v <- momentum * v + (g + weight_decay * w)`, then `w <- w - lr_now * v`.
pub fn sgd_step(
    weights: &mut Matrix,
    grads: &Matrix,
    velocity: &mut Matrix,
    cfg: &SgdConfig,
    lr_now: f64,
) -> Result<()> {
    if weights.shape() != grads.shape() || weights.shape() != velocity.shape() {
        return Err(Error::invalid(format!(
            "sgd shapes differ: weights {:?}, grads {:?}, velocity {:?}",
            weights.shape(),
            grads.shape(),
            velocity.shape()
        )));
    }
    sgd_update(
        weights.data_mut(),
        grads.data(),
        velocity.data_mut(),
        cfg,
        lr_now,
    );
    Ok(())
}

/// Slice form of [`sgd_step`]; the three slices must have equal length.
pub fn sgd_update(w: &mut [f32], g: &[f32], v: &mut [f32], cfg: &SgdConfig, lr_now: f64) {
    debug_assert!(w.len() == g.len() && w.len() == v.len());
    let mu = cfg.momentum as f32;
    let wd = cfg.weight_decay as f32;
    let lr = lr_now as f32;
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + (g + wd * *w);
        *w -= lr * *v;
    }
}

/// `lr0 * (1 - step / total_steps)`.
pub fn linear_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("linear schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} is past the end of a {total_steps}-step schedule"
        )));
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64))
}
