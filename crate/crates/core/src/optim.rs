use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction. Moments are created on the first step and
/// must match the parameter shapes on every later one.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, first_moment: Vec::new(), second_moment: Vec::new(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.step == 0 && self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, id) in params.ids().enumerate() {
            let p = params.get(id);
            if self.first_moment[i].len() != p.value.numel() || p.grad.len() != p.value.numel() {
                return Err(Error::Dimension(format!(
                    "optimizer moment for {} has {} values, parameter has {:?}",
                    p.name,
                    self.first_moment[i].len(),
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id);
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
