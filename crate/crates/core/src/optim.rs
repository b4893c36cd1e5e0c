//! Adam with per-epoch exponential learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gamma: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gamma: 0.96,
        }
    }
}

/// First/second moments per parameter, step counter and current rate.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Result<Self> {
        if config.lr <= 0.0 || !(config.gamma > 0.0 && config.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "Adam needs lr > 0 and 0 < gamma <= 1, got lr={} gamma={}",
                config.lr, config.gamma
            )));
        }
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Ok(Self {
            config,
            lr: config.lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    /// One update from the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.requires_grad && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(self.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad.as_ref().filter(|_| p.requires_grad) else {
                continue;
            };
            for (((w, &gv), mv), vv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *w = *w - step_size * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }

    /// `lr <- lr * gamma`, called once per epoch.
    pub fn decay(&mut self) {
        self.lr *= self.config.gamma;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v));
        s.get_mut(id).grad = Some(Tensor::scalar(g));
        s
    }

    #[test]
    fn single_step() {
        let mut s = store(1.0, 1.0);
        let mut opt = Adam::new(AdamConfig::default(), &s).unwrap();
        opt.step(&mut s).unwrap();
        // m_hat = v_hat = 1, update = lr / (1 + eps)
        let expect = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((s.iter().next().unwrap().value[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut s = store(0.5, 0.0);
        let mut opt = Adam::new(AdamConfig::default(), &s).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value[0], 0.5);
    }

    #[test]
    fn missing_grad_errors() {
        let mut s = store(0.5, 0.0);
        s.zero_grad();
        let mut opt = Adam::new(AdamConfig::default(), &s).unwrap();
        assert!(matches!(opt.step(&mut s), Err(Error::MissingGrad(n)) if n == "p"));
    }

    #[test]
    fn decay_multiplies() {
        let s = store(0.0, 0.0);
        let mut opt = Adam::new(AdamConfig::default(), &s).unwrap();
        opt.decay();
        assert!((opt.lr - 0.00096).abs() < 1e-15);
        let bad = AdamConfig {
            gamma: 1.5,
            ..AdamConfig::default()
        };
        assert!(Adam::new(bad, &s).is_err());
    }
}
