use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

/// First/second moment accumulators for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        AdamState {
            config,
            first: params.iter().map(|p| vec![T::ZERO; p.len()]).collect(),
            second: params.iter().map(|p| vec![T::ZERO; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(config_err!(
                "adam tracks {} parameters but got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(config_err!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_b1 = T::from_f64(1.0 - c.beta1);
        let one_b2 = T::from_f64(1.0 - c.beta2);
        let corr1 = T::from_f64(1.0 - c.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - c.beta2.powi(t));
        let lr = T::from_f64(c.learning_rate);
        let eps = T::from_f64(c.epsilon);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let mhat = *mv / corr1;
                let vhat = *vv / corr2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
