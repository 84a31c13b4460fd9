//! Bias-corrected Adam with an externally controlled learning rate
//! (the training loops apply exponential per-epoch decay).

use super::{Elem, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for a fixed list of parameter tensors. The parameter
/// order at every step must match the order given at construction.
pub struct Adam<T> {
    cfg: AdamConfig,
    lr: T,
    step: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Elem> Adam<T> {
    pub fn new(param_shapes: &[Vec<usize>], lr: T) -> Self {
        let moments = param_shapes
            .iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .collect();
        Adam {
            cfg: AdamConfig::default(),
            lr,
            step: 0,
            moments,
        }
    }

    pub fn set_lr(&mut self, lr: T) {
        self.lr = lr;
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(Error::Shape(format!(
                "adam: {} params / {} grads vs {} state slots",
                params.len(),
                grads.len(),
                self.moments.len()
            )));
        }
        self.step += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let bc1 = T::one() - T::from_f64(self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::from_f64(self.cfg.beta2.powi(self.step as i32));
        for ((param, grad), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if param.shape() != m.shape() || grad.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "adam: param/grad shape {:?}/{:?} vs state {:?}",
                    param.shape(),
                    grad.shape(),
                    m.shape()
                )));
            }
            for i in 0..param.numel() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] = param[i] - self.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponentially decayed learning rate for a given epoch.
pub fn decayed_lr(initial: f64, decay: f64, epoch: usize) -> f64 {
    initial * decay.powi(epoch as i32)
}
