//! Stochastic gradient descent.

use std::collections::BTreeMap;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::param::{Param, ParamId};
use crate::tensor::Gradients;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `d = g + wd * p; v = mu * v + d; p -= lr * v`, with `v = d` on the first step.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Array>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(Error::InvalidInput(format!(
                "momentum {momentum} must be in [0, 1) and weight decay {weight_decay} non-negative"
            )));
        }
        Ok(Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    /// Updates every trainable parameter that has a gradient. Returns the
    /// number of parameters touched.
    pub fn step(&mut self, params: &[Param], grads: &Gradients, lr: f64) -> Result<usize> {
        let mut touched = 0;
        for p in params.iter().filter(|p| p.is_trainable()) {
            let Some(g) = grads.param(p) else { continue };
            let mut d = g.clone();
            if self.weight_decay > 0.0 {
                for (dv, pv) in d.data_mut().iter_mut().zip(p.value().data()) {
                    *dv += self.weight_decay * pv;
                }
            }
            let v = match self.velocity.get_mut(&p.id()) {
                Some(v) if self.momentum > 0.0 => {
                    for (vv, dv) in v.data_mut().iter_mut().zip(d.data()) {
                        *vv = self.momentum * *vv + dv;
                    }
                    v.clone()
                }
                _ => {
                    self.velocity.insert(p.id(), d.clone());
                    d
                }
            };
            if !v.all_finite() {
                return Err(Error::NonFinite { op: "sgd" });
            }
            p.update(|a| {
                for (x, dv) in a.data_mut().iter_mut().zip(v.data()) {
                    *x -= lr * dv;
                }
            });
            touched += 1;
        }
        Ok(touched)
    }
}

/// Rescales parameter gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.param_norm();
    if norm > max_norm {
        grads.scale(max_norm / (norm + 1e-12));
    }
    norm
}
