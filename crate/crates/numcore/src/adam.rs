//! Adam with decoupled weight decay, keyed by parameter name.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: `p -= lr * weight_decay * p` on top of the moment
    /// update, so decay never enters the moment estimates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-parameter first/second moment state, addressed by name so it can be
/// checkpointed and re-attached to a rebuilt model.
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Starts a new step; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to a single named parameter.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if grad.len() != param.len() {
            return Err(TensorError::ShapeDataMismatch { shape: param.shape().to_vec(), len: grad.len() });
        }
        if self.t == 0 {
            return Err(TensorError::InvalidParam {
                op: "adam",
                detail: "begin_step must be called before update".to_string(),
            });
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { context: format!("gradient of {} (value {})", name, bad) });
        }
        let n = param.len();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n {
            return Err(TensorError::ShapeDataMismatch { shape: param.shape().to_vec(), len: m.len() });
        }
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let data = param.data_mut();
        for i in 0..n {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps) + c.lr * c.weight_decay * data[i];
        }
        Ok(())
    }

    /// Moment state export for checkpointing: `(name, m, v)` per parameter.
    pub fn state(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.m.iter().map(|(name, m)| (name.as_str(), m.as_slice(), self.v[name].as_slice()))
    }

    /// Restores one parameter's moment state (from a checkpoint).
    pub fn restore(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>, t: u64) -> Result<()> {
        if m.len() != v.len() {
            return Err(TensorError::ShapeDataMismatch { shape: vec![m.len()], len: v.len() });
        }
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        // With bias correction, step one is lr * g / (|g| + eps).
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        opt.begin_step();
        opt.update("p", &mut p, &[0.5, -0.25]).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.data()[1] - (-1.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_params_even_with_zero_gradient() {
        let mut opt = Adam::new(AdamConfig { lr: 0.5, weight_decay: 0.1, ..AdamConfig::default() });
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        opt.begin_step();
        opt.update("p", &mut p, &[0.0]).unwrap();
        // Moment update is zero; only the decay term acts: 2 - 0.5*0.1*2.
        assert!((p.data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn update_without_begin_step_is_an_error() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(opt.update("p", &mut p, &[1.0]).is_err());
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        opt.begin_step();
        assert!(matches!(
            opt.update("p", &mut p, &[f64::NAN]).unwrap_err(),
            TensorError::NonFinite { .. }
        ));
    }
}
