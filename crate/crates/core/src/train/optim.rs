use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub warmup: usize,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_scale: f32,
    pub tokens_per_batch: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, epsilon: 1e-9, warmup: 400, lr_scale: 1.0, tokens_per_batch: 2048, clip_norm: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 {
            return Err(Error::InvalidConfig("warmup must be at least 1 step".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if self.tokens_per_batch == 0 {
            return Err(Error::InvalidConfig("tokens_per_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse-square-root learning rate with linear warmup.
pub fn lr_at(step: usize, d: usize, warmup: usize, scale: f32) -> f32 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    let rate = (d as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5));
    (scale as f64 * rate) as f32
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    epsilon: f32,
    first: Parameters,
    second: Parameters,
    steps: i32,
}

impl Adam {
    pub fn new(params: &Parameters, cfg: &OptimizerConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps as usize
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, lr: f32) -> Result<()> {
        if !params.same_layout(grads) {
            return Err(Error::Shape("gradient layout does not match parameters".into()));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.first.tensors)
            .zip(&mut self.second.tensors)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
