//! SGD with Nesterov momentum and an epoch-indexed cosine learning rate.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_epochs: usize) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) || total_epochs == 0 {
            return Err(Error::Config(format!(
                "cosine schedule needs base_lr >= 0 and at least one epoch (got {base_lr}, {total_epochs})"
            )));
        }
        Ok(CosineSchedule { base_lr, total_epochs })
    }

    /// `base_lr · ½ · (1 + cos(π·t/T))` for `0 ≤ t ≤ T`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::Usage(format!("epoch {epoch} outside schedule of {} epochs", self.total_epochs)));
        }
        let phase = PI * epoch as f64 / self.total_epochs as f64;
        Ok(self.base_lr * 0.5 * (1.0 + phase.cos()))
    }
}

/// Nesterov SGD: `v ← μ·v + g`, then `p ← p − lr·(g + μ·v)`.
#[derive(Debug, Clone)]
pub struct SgdNesterov<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdNesterov<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        let velocity = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Ok(SgdNesterov { momentum, weight_decay: 0.0, velocity })
    }

    pub fn velocity(&self, index: usize) -> &[T] {
        &self.velocity[index]
    }

    /// Applies one update using the gradients stored on each parameter.
    /// Parameters without a gradient buffer are treated as having zero grad.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::dim("sgd_step", format!("{} velocity buffers for {} parameters", self.velocity.len(), params.len())));
        }
        let (mu, lr) = (T::of(self.momentum), T::of(lr));
        for (t, v) in params.tensors_mut().iter_mut().zip(&mut self.velocity) {
            if t.len() != v.len() {
                return Err(Error::dim("sgd_step", format!("velocity of length {} for shape {:?}", v.len(), t.shape())));
            }
            let (p, g) = t.value_and_grad_mut();
            let Some(g) = g else { continue };
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *p -= lr * (g + mu * *v);
            }
        }
        Ok(())
    }
}
