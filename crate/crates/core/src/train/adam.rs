use std::collections::BTreeMap;

use crate::arch::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Adam with bias correction. Moment estimates are kept per parameter name
/// in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to a single tensor at step `t ≥ 1`.
    pub fn update<T: Real>(
        &mut self,
        name: &str,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        t: u64,
    ) -> Result<()> {
        if t == 0 {
            return Err(Error::Config("adam step index starts at 1".into()));
        }
        if param.shape() != grad.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{name}: parameter {} vs gradient {}",
                    param.shape(),
                    grad.shape()
                ),
            ));
        }
        let n = param.len();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: state has {} entries, parameter {n}", m.len()),
            ));
        }
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g.as_f64();
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let delta = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            *p = T::from_f64_lossy(p.as_f64() - delta);
        }
        Ok(())
    }

    /// One step over every trainable tensor in `params`. Each must have a
    /// gradient in `grads`.
    pub fn step<T: Real>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        let t = self.step + 1;
        for (name, param) in params.trainable_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::Autodiff(format!("no gradient for parameter {name}")))?;
            self.update(name, param, grad, t)?;
        }
        self.step = t;
        Ok(())
    }
}
