//! Adam with global-norm clipping and linear warmup.

use super::params::Parameters;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip: 1.0,
            warmup_steps: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<F: Real>(config: AdamConfig, params: &Parameters<F>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps as f64;
        if w == 0.0 {
            self.config.lr
        } else {
            self.config.lr * ((self.step + 1) as f64 / w).min(1.0)
        }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step<F: Real>(&mut self, params: &mut Parameters<F>, grads: &Parameters<F>) -> Result<f64> {
        let norm = grads.l2_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm {norm}")));
        }
        let c = self.config;
        let clip = if c.clip > 0.0 && norm > c.clip { c.clip / norm } else { 1.0 };
        let lr = self.current_lr();
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (ti, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            let decay = c.weight_decay > 0.0 && p.dims.len() == 2;
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for i in 0..p.data.len() {
                let gi = g.data[i].f64() * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mut x = p.data[i].f64();
                if decay {
                    x -= lr * c.weight_decay * x;
                }
                x -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p.data[i] = F::of(x);
            }
        }
        Ok(norm)
    }
}
