use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with moment buffers laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl Adam {
    pub fn new(config: AdamConfig, like: &ModelParams) -> Self {
        Self {
            config,
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        params.check_layout(grads)?;
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let iter = params
            .iter_values_mut()
            .zip(grads.iter_values())
            .zip(self.m.iter_values_mut().zip(self.v.iter_values_mut()));
        for ((p, g), (m, v)) in iter {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        Ok(())
    }
}
