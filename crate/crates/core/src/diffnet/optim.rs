use serde::{Deserialize, Serialize};

use super::graph::Mat;
use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment adaptive optimiser state (Adam).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Mat::zeros(t.raw_dim())).collect();
        Self { config, first: zeros(), second: zeros(), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (g, p) in grads.iter().zip(params.tensors()) {
            if g.dim() != p.dim() {
                return Err(Error::Shape(format!("gradient {:?} vs parameter {:?}", g.dim(), p.dim())));
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= learning_rate * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }
}
