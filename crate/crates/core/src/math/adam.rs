use serde::{Deserialize, Serialize};

use super::mlp::MlpParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam moments over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
        }
    }

    pub fn for_mlp(config: AdamConfig, params: &MlpParams) -> Self {
        Self::new(config, params.slices().map(<[f64]>::len).sum())
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }

    /// Applies one update to the concatenation of `params` slices.
    pub fn step_slices<'a, 'b>(
        &mut self,
        params: impl Iterator<Item = &'a mut [f64]>,
        grads: impl Iterator<Item = &'b [f64]> + Clone,
    ) -> Result<()> {
        let total: usize = grads.clone().map(<[f64]>::len).sum();
        if total != self.first.len() {
            return Err(Error::shape("adam gradient", self.first.len(), total));
        }
        if grads.clone().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteInput("adam gradient".into()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let mut off = 0;
        for (p, g) in params.zip(grads) {
            if p.len() != g.len() {
                return Err(Error::shape("adam parameter block", p.len(), g.len()));
            }
            let m = &mut self.first[off..off + g.len()];
            let v = &mut self.second[off..off + g.len()];
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            off += g.len();
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, params: &mut MlpParams, grads: &MlpParams) -> Result<()> {
        self.step_slices(params.slices_mut(), grads.slices())
    }

    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_slices(std::iter::once(params), std::iter::once(grads))
    }
}
