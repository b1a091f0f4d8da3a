//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numcore::{Scalar, Tensor};

/// Moment decay rates and the denominator guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: step count and per-tensor moments kept in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub weight_decay: f64,
    steps: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamConfig, weight_decay: f64) -> Self {
        Self {
            config,
            weight_decay,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    /// Number of completed updates.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to `params` from the matching `grads`. Nothing is
    /// modified when any gradient is non-finite or mis-shaped.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<(), TrainError> {
        if params.len() != grads.len() {
            return Err(TrainError::InvalidConfig(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(TrainError::GradientShape {
                    tensor: name.clone(),
                    expected: p.len(),
                    actual: g.len(),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient { tensor: name.clone() });
            }
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for ((name, p), g) in params.iter_mut().zip(grads) {
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (((x, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *x = T::from_f64(x.as_f64() * decay - lr * update);
            }
        }
        Ok(())
    }
}
