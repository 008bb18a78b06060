use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 1024,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam moment estimates for one parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, dim: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One bias-corrected update of `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= learning_rate * mh / (vh.sqrt() + epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_quadratic_converges() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, 1);
        let mut w = [0.0];
        let mut hit = None;
        for k in 0..500 {
            let g = [w[0] - 3.0];
            opt.step(&mut w, &g);
            if (w[0] - 3.0).abs() < 1e-3 && hit.is_none() {
                hit = Some(k);
            }
        }
        assert!(hit.is_some());
        assert!((w[0] - 3.0).abs() < 1e-3, "{}", w[0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias correction makes the first step exactly lr * sign(g).
        let mut opt = Adam::new(AdamConfig::default(), 2);
        let mut w = [1.0, 1.0];
        opt.step(&mut w, &[5.0, -0.01]);
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (1.0 + 1e-3)).abs() < 1e-6);
    }
}
