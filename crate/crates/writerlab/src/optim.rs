//! AdamW with decoupled weight decay, plus the warmup + cosine decay
//! learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub epochs_per_stage: usize,
    pub grad_accum_steps: usize,
    pub micro_batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    /// per-stage cap on training examples
    pub sample_cap: usize,
    /// one warmup+cosine over the whole curriculum instead of per stage
    pub shared_schedule: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-4,
            warmup_ratio: 0.1,
            epochs_per_stage: 3,
            grad_accum_steps: 8,
            micro_batch_size: 1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            seed: 0,
            sample_cap: 1000,
            shared_schedule: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must be in [0,1)".into()));
        }
        if self.grad_accum_steps == 0 {
            return Err(Error::Config("grad_accum_steps must be >= 1".into()));
        }
        if self.micro_batch_size == 0 {
            return Err(Error::Config("micro_batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear warmup to peak over ceil(warmup_ratio * total) steps, then cosine
/// decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule over zero total steps".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {} past total {}", step, total_steps)));
    }
    let warmup = (config.warmup_ratio * total_steps as f64).ceil() as usize;
    let lr = if step < warmup {
        config.peak_lr * step as f64 / warmup as f64
    } else if total_steps == warmup {
        config.peak_lr
    } else {
        let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
        config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    };
    Ok(lr)
}

/// Per-parameter first/second moment buffers and the shared step counter.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }

    /// One AdamW update over the given (name, param, grad) triples.
    /// Anything not in the iterator is untouched by construction.
    pub fn adamw_step<'a, I>(&mut self, params: I, lr: f64, cfg: &TrainConfig) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut [f64], &'a [f64])>,
    {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, theta, grad) in params {
            if grad.iter().any(|g| g.is_nan()) {
                return Err(Error::Data(format!("NaN gradient for parameter '{}'", name)));
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
            for i in 0..theta.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) {
    let total: f64 = grads.values().flat_map(|g| g.iter()).map(|g| g * g).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}
