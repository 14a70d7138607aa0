//! Optimizers and the learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::nn::{ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.02,
            betas: (0.5, 0.999),
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam update of `params` at step `t` (1-based).
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamMoments, t: u64, cfg: &AdamConfig) {
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<usize, AdamMoments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates every parameter of `group` that holds a gradient.
    pub fn step(&mut self, store: &mut ParamStore, group: ParamGroup) {
        self.step += 1;
        let ids: Vec<_> = store.group_ids(group).collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(g) = p.grad.as_ref() else { continue };
            let state = self.moments.entry(id.index()).or_default();
            adam_update(p.value.data_mut(), g.data(), state, self.step, &self.config);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 3e-4,
        }
    }
}

/// `v = momentum * v + g; p -= lr * v`.
pub fn sgd_momentum_update(params: &mut [f64], grads: &[f64], velocity: &mut Vec<f64>, lr: f64, momentum: f64) {
    if velocity.len() != params.len() {
        *velocity = vec![0.0; params.len()];
    }
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<usize, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: BTreeMap::new(),
        }
    }

    /// Momentum step with coupled weight decay over every parameter of `group`
    /// that holds a gradient.
    pub fn step(&mut self, store: &mut ParamStore, group: ParamGroup, lr: f64) {
        let ids: Vec<_> = store.group_ids(group).collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(g) = p.grad.as_ref() else { continue };
            let wd = self.config.weight_decay;
            let grads: Vec<f64> = g.data().iter().zip(p.value.data()).map(|(g, w)| g + wd * w).collect();
            let v = self.velocity.entry(id.index()).or_default();
            sgd_momentum_update(p.value.data_mut(), &grads, v, lr, self.config.momentum);
        }
    }
}

/// Rescales the group's gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, group: ParamGroup, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.group_ids(group).collect();
    let norm = ids
        .iter()
        .filter_map(|&id| store.get(id).grad.as_ref())
        .flat_map(|g| g.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for id in ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at `total`, no restarts.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = epoch.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos())
}
