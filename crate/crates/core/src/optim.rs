//! Adam with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }

    /// One bias-corrected update of every parameter. Fails before touching
    /// any parameter if a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        for id in params.ids() {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    params.name(id)
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(beta1, t);
        let bc2 = 1.0 - libm::pow(beta2, t);
        for id in params.ids() {
            let g = grads.get(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.5);
        let g = GradStore::zeros_like(&s);
        let mut a = AdamState::new(AdamConfig::default(), &s);
        a.step(&mut s, &g).unwrap();
        assert_eq!(s.get(s.find("x").unwrap()).data(), &[1.5]);
        assert_eq!(a.step_count(), 1);
    }

    #[test]
    fn first_step_is_minus_lr_sign() {
        let mut s = scalar_store(0.0);
        let id = s.find("x").unwrap();
        let mut g = GradStore::zeros_like(&s);
        g.get_mut(id)[0] = 0.5;
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut a = AdamState::new(cfg, &s);
        a.step(&mut s, &g).unwrap();
        let expected = -0.1 * 0.5 / (0.5 + 1e-8);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
        assert!((s.get(id).data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let mut s = scalar_store(2.0);
        let id = s.find("x").unwrap();
        let mut g = GradStore::zeros_like(&s);
        g.get_mut(id)[0] = 1.0;
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut a = AdamState::new(cfg, &s);
        a.step(&mut s, &g).unwrap();
        a.step(&mut s, &g).unwrap();

        // hand-iterated recurrence
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((s.get(id).data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = scalar_store(0.0);
        let id = s.find("x").unwrap();
        let mut g = GradStore::zeros_like(&s);
        g.get_mut(id)[0] = f64::NAN;
        let mut a = AdamState::new(AdamConfig::default(), &s);
        match a.step(&mut s, &g) {
            Err(Error::Numeric(msg)) => assert!(msg.contains('x')),
            other => panic!("expected numeric error, got {other:?}"),
        }
        assert_eq!(a.step_count(), 0);
    }
}
