//! AdamW and the scalar schedules used by pretraining.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
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

/// AdamW with decoupled weight decay. Moments are keyed by parameter name so
/// they can be checkpointed alongside the weights.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Array2<f64>>,
    pub second: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    /// Applies one update. `decay(name)` says whether weight decay applies to a
    /// parameter (biases and norms are usually excluded).
    pub fn update(
        &mut self,
        params: &mut BTreeMap<String, Array2<f64>>,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
        weight_decay: f64,
        decay: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let wd = if decay(name) { weight_decay } else { 0.0 };
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

/// Scales each gradient tensor whose L2 norm exceeds `max_norm` down to it.
pub fn clip_per_tensor(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) {
    for g in grads.values_mut() {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > max_norm {
            *g *= max_norm / (norm + 1e-6);
        }
    }
}

/// Half-cosine from `start` to `end` over `total` steps with an optional linear
/// warmup from 0 to `start` over the first `warmup` steps.
pub fn cosine_schedule(start: f64, end: f64, step: u64, total: u64, warmup: u64) -> f64 {
    if step < warmup {
        return start * (step as f64 + 1.0) / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return end;
    }
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear ramp from `start` to `end` over `warmup` steps, then constant.
pub fn linear_warmup(start: f64, end: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        return end;
    }
    start + (end - start) * step as f64 / warmup as f64
}
