use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter using the
/// gradients currently stored. `step` counts from 1.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, lr: f64, cfg: &AdamConfig, step: u64) {
    let step = step.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(step);
    let c2 = 1.0 - cfg.beta2.powi(step);
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let (one_b1, one_b2) = (T::c(1.0 - cfg.beta1), T::c(1.0 - cfg.beta2));
    let step_size = T::c(lr / c1);
    let c2 = T::c(c2);
    let eps = T::c(cfg.eps);
    for p in store.iter_mut().filter(|p| p.trainable) {
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = b1 * p.m[i] + one_b1 * g;
            p.v[i] = b2 * p.v[i] + one_b2 * g * g;
            let vhat = p.v[i] / c2;
            p.value[i] -= step_size * p.m[i] / (vhat.sqrt() + eps);
        }
    }
}
