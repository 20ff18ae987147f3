//! Adam with decoupled weight decay and a warmup + cosine learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of the run spent in linear warmup.
    pub warmup_frac: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_frac: 0.05,
        }
    }
}

/// Linear warmup to the peak rate, then cosine decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_frac: f64, total_steps: usize) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_frac).round() as usize;
        Self {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.value(id).numel()])
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies one update at learning rate `lr`. Frozen parameters and
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let decay = if store.value(id).ndim() >= 2 {
                c.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.value_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * w[i]);
            }
        }
    }
}
