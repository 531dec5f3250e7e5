use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const BASE_LR: f64 = 1e-5;
pub const LR_DECAY: f64 = 0.96;
pub const DECAY_EVERY: usize = 4;
pub const CLIP_NORM: f64 = 1.0;
pub const BATCH_SIZE: usize = 16;
pub const EPOCHS: usize = 50;

/// Step schedule `base * decay^(epoch / every)` for a 0-based epoch.
pub fn step_lr(base: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    base * decay.powi((epoch / every.max(1)) as i32)
}

/// The default schedule: `1e-5 * 0.96^floor(epoch / 4)`.
pub fn lr_at_epoch(epoch: usize) -> f64 {
    step_lr(BASE_LR, LR_DECAY, DECAY_EVERY, epoch)
}

/// Rescales every gradient by `max_norm / g` when the global l2 norm `g`
/// exceeds `max_norm`. Returns `g` before clipping.
pub fn clip_gradients(grads: &mut ParamSet, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("clip norm must be positive, got {max_norm}")));
    }
    let g = grads.global_norm();
    if g > max_norm {
        let k = max_norm / g;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(g)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update of every parameter in `params` with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name)?;
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "adam: `{name}` parameter {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let m = m.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
