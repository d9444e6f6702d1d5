//! Adaptive moment estimation with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tensor};
use crate::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: first and second moments per named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0 && config.lr.is_finite()) {
            return Err(invalid(format!("learning rate {} must be positive", config.lr)));
        }
        if !((0.0..1.0).contains(&config.beta1) && (0.0..1.0).contains(&config.beta2) && config.eps > 0.0) {
            return Err(invalid("Adam decay rates must lie in [0, 1) and eps must be positive"));
        }
        Ok(Adam { config, t: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    /// Starts a new step; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(invalid(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if self.t == 0 {
            return Err(invalid("Adam::update before begin_step"));
        }
        let c = self.config;
        let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(param.shape()).unwrap());
        let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(param.shape()).unwrap());
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step = T::of(c.lr / (1.0 - c.beta1.powi(self.t as i32)));
        let corr2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let eps = T::of(c.eps);
        let mut mv = m.to_vec();
        let mut vv = v.to_vec();
        let mut pv = param.to_vec();
        for (((p, mi), vi), &g) in pv.iter_mut().zip(mv.iter_mut()).zip(vv.iter_mut()).zip(grad.data()) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            *p -= step * *mi / ((*vi / corr2).sqrt() + eps);
        }
        *m = Tensor::new(param.shape().to_vec(), mv)?;
        *v = Tensor::new(param.shape().to_vec(), vv)?;
        *param = Tensor::new(param.shape().to_vec(), pv)?;
        Ok(())
    }
}
