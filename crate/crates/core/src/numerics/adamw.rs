//! AdamW optimizer: Adam moments with decoupled weight decay.

use super::grid::Grid;
use crate::error::{Error, Result};

/// Hyperparameters. Defaults: lr 1e-4, weight decay 0.05, betas (0.9, 0.999),
/// epsilon 1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamWState {
    config: AdamWConfig,
    m: Vec<Grid>,
    v: Vec<Grid>,
    step: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, param_shapes: &[&[usize]]) -> Result<Self> {
        if config.lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate {} must be > 0", config.lr)));
        }
        Ok(AdamWState {
            config,
            m: param_shapes.iter().map(|s| Grid::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Grid::zeros(s)).collect(),
            step: 0,
        })
    }

    pub fn for_params(config: AdamWConfig, params: &[Grid]) -> Result<Self> {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// One decoupled-weight-decay update with bias correction, in place.
    /// Non-finite gradients abort with an error rather than corrupting the
    /// parameters.
    pub fn step(&mut self, params: &mut [Grid], grads: &[Grid]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adamw: {} params / {} grads, state holds {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            p.require_same_shape(g, "adamw_step")?;
            g.check_finite("adamw_step gradient")?;
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 / (1.0 - c.beta1.powi(self.step as i32));
        let bc2 = 1.0 / (1.0 - c.beta2.powi(self.step as i32));
        for i in 0..params.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] * bc1;
                let v_hat = v[j] * bc2;
                p[j] -= c.lr * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}
