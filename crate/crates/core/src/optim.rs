//! Decoupled-weight-decay Adam and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// Per-parameter first and second moments, kept in f64 regardless of the
/// parameter precision.
pub struct AdamW {
    pub config: AdamWConfig,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every named parameter using the gradients
    /// accumulated on the stored leaves, then replaces each leaf. Parameters
    /// without a gradient are treated as having a zero gradient. Returns the
    /// pre-clip global gradient norm.
    pub fn step<F: Float>(&mut self, store: &mut ParamStore<F>, names: &[String], lr: f64) -> Result<f64> {
        let c = self.config;
        let grads: Vec<Option<Vec<F>>> = names
            .iter()
            .map(|n| {
                store
                    .leaf(n)
                    .map(|t| t.grad())
                    .ok_or_else(|| Error::MissingEntry(n.clone()))
            })
            .collect::<Result<_>>()?;
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter().map(|v| v.f64() * v.f64()))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, grad) in names.iter().zip(grads) {
            let leaf = store.leaf(name).expect("checked above");
            let n = leaf.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data: Vec<F> = leaf
                .data()
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let g = grad.as_ref().map_or(0.0, |g| g[i].f64()) * clip;
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                    let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                    let p = p.f64() * (1.0 - lr * c.weight_decay);
                    F::of(p - lr * update)
                })
                .collect();
            store.set_data(name, data)?;
        }
        Ok(norm)
    }
}

/// Cosine annealing from `base` to `min_lr` over `total` steps after a
/// linear warm-up of `warmup` steps.
pub fn cosine_lr(step: u64, total: u64, base: f64, min_lr: f64, warmup: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}
