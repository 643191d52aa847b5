use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Tensor;

/// Mini-batch gradient descent settings shared by pretraining and tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Rescale the step when the global gradient norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{path}.lr"), "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("{path}.momentum"), "must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{path}.batch_size"), "must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!("{path}.clip_norm"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: &OptimizerConfig) -> Self {
        Self {
            lr: config.lr,
            momentum: config.momentum,
            clip_norm: config.clip_norm,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let factor = match self.clip_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + factor * gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}
