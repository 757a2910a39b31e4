//! Adam with bias correction and the per-stage cosine schedule.

use std::f64::consts::PI;

use crate::params::{Grads, ModuleGroup, ParamSet};

/// Cosine decay from `base` at step 0 to zero at `total_steps`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    base * 0.5 * (1.0 + (PI * s).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per scalar, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Updates applied so far.
    pub step: u64,
}

impl Adam {
    pub fn new(ps: &ParamSet, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = ps.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn moments_finite(&self) -> bool {
        self.m.iter().chain(&self.v).flatten().all(|x| x.is_finite())
    }

    /// One update of every tensor whose group is in `tunable`; the others and
    /// their moments are left untouched.
    pub fn update(&mut self, ps: &mut ParamSet, g: &Grads, lr: f64, tunable: &[ModuleGroup]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, t) in ps.tensors_mut().iter_mut().enumerate() {
            if !tunable.contains(&t.group) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (p, &gk)) in t.data.iter_mut().zip(&g.data[i]).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                *p -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

/// Zeroes gradients of frozen groups, then rescales the rest to global norm
/// at most `max_norm`. Returns the norm before clipping.
pub fn clip_tunable(ps: &ParamSet, g: &mut Grads, tunable: &[ModuleGroup], max_norm: f64) -> f64 {
    for (t, d) in ps.tensors().iter().zip(g.data.iter_mut()) {
        if !tunable.contains(&t.group) {
            d.fill(0.0);
        }
    }
    let norm = g.global_norm();
    if norm > max_norm {
        g.scale(max_norm / norm);
    }
    norm
}
