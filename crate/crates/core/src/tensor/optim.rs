use serde::{Deserialize, Serialize};

use super::{shape_err, Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.1,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, params: &[Tensor<F>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` (usually from an [`LrSchedule`]).
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lr: f64) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::Argument {
                op: "adamw_step",
                message: format!(
                    "{} parameters, {} gradients, state for {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(shape_err("adamw_step", &[p.shape(), g.shape(), m.shape()]));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = F::of(1.0 - c.beta1.powi(t));
        let bc2 = F::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one, eps, lr_f) = (F::one(), F::of(c.eps), F::of(lr));
        let decay = F::of(1.0 - lr * c.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pj = *pj * decay - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base` over `warmup` steps, then linear decay reaching
/// zero at `total + 1`. Steps are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn new(base: f64, warmup: u64, total: u64) -> Self {
        Self { base, warmup, total }
    }

    pub fn rate(&self, step: u64) -> f64 {
        if self.warmup > 0 && step <= self.warmup {
            return self.base * step as f64 / self.warmup as f64;
        }
        if step > self.total {
            return 0.0;
        }
        let span = (self.total + 1 - self.warmup) as f64;
        self.base * (self.total + 1 - step) as f64 / span
    }
}
