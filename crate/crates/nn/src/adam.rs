use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every trainable entry of a [`ParameterSet`], in the
/// set's order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParameterSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .trainable()
            .into_iter()
            .map(|i| Tensor::zeros(params.entry(i).value.shape()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. `grads[j]` belongs to the `j`-th trainable entry.
    pub fn update(&mut self, params: &mut ParameterSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        let idx = params.trainable();
        if grads.len() != idx.len() || self.m.len() != idx.len() {
            return Err(shape_err(
                "adam",
                format!("{} gradients, {} moments, {} trainable tensors", grads.len(), self.m.len(), idx.len()),
            ));
        }
        for (j, &i) in idx.iter().enumerate() {
            let shape = params.entry(i).value.shape();
            if grads[j].shape() != shape || self.m[j].shape() != shape {
                return Err(shape_err(
                    "adam",
                    format!("'{}' is {shape:?}, gradient {:?}", params.entry(i).name, grads[j].shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (j, &i) in idx.iter().enumerate() {
            let p = params.entry_mut(i).value.data_mut();
            let m = self.m[j].data_mut();
            let v = self.v[j].data_mut();
            for (k, g) in grads[j].data().iter().enumerate() {
                let g = g.as_f64();
                let mk = beta1 * m[k].as_f64() + (1.0 - beta1) * g;
                let vk = beta2 * v[k].as_f64() + (1.0 - beta2) * g * g;
                m[k] = T::from_f64(mk);
                v[k] = T::from_f64(vk);
                let delta = lr * (mk / c1) / ((vk / c2).sqrt() + eps);
                p[k] = T::from_f64(p[k].as_f64() - delta);
            }
        }
        Ok(())
    }
}
