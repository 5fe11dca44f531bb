//! AdamW with decoupled weight decay and a reduce-on-plateau scheduler.

use serde::{Deserialize, Serialize};

use super::layers::Scalar;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, weight_decay: 0.01, eps: 1e-8 }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if !ok {
            return Err(invalid(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 }
    }
}

/// One update at learning rate `lr`. Non-finite gradients leave the weights
/// untouched and return [`Error::Diverged`].
pub fn adamw_step<T: Scalar>(
    weights: &mut [T],
    grads: &[T],
    state: &mut AdamWState<T>,
    hyper: &AdamW,
    lr: f64,
) -> Result<()> {
    let n = weights.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch { expected: vec![n], got: vec![grads.len(), state.m.len(), state.v.len()] });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            epoch: 0,
            message: format!("non-finite gradient at parameter {i}"),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - hyper.beta1), T::of(1.0 - hyper.beta2));
    let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
    let (lr_t, wd, eps) = (T::of(lr), T::of(hyper.weight_decay), T::of(hyper.eps));
    for i in 0..n {
        let g = grads[i];
        let m = b1 * state.m[i] + one_b1 * g;
        let v = b2 * state.v[i] + one_b2 * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m * inv_bc1;
        let v_hat = v * inv_bc2;
        weights[i] = weights[i] - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * weights[i]);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Relative improvement a loss must beat to reset the counter.
    pub threshold: f64,
}

impl Default for Plateau {
    fn default() -> Self {
        Self { patience: 32, factor: 0.1, min_lr: 1e-6, threshold: 1e-4 }
    }
}

impl Plateau {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) || self.min_lr < 0.0 || self.threshold < 0.0 {
            return Err(invalid(format!("invalid scheduler settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub best: Option<f64>,
    pub num_bad: usize,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        Self { lr, best: None, num_bad: 0 }
    }

    /// Feeds one validation loss; returns true when the rate was reduced.
    pub fn step(&mut self, cfg: &Plateau, val_loss: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => val_loss < b * (1.0 - cfg.threshold),
        };
        if improved {
            self.best = Some(val_loss);
            self.num_bad = 0;
            return false;
        }
        self.num_bad += 1;
        if self.num_bad > cfg.patience {
            self.num_bad = 0;
            let new_lr = (self.lr * cfg.factor).max(cfg.min_lr);
            let changed = new_lr < self.lr;
            self.lr = new_lr;
            return changed;
        }
        false
    }
}
