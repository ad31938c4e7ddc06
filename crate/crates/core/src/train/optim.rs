//! AdamW and the exponential learning-rate schedule.

use crate::error::{shape_err, Result};
use crate::nn::{round_to_f32, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of `theta` in place; `t` is the 1-based step count.
pub fn adamw_update(
    theta: &mut [Real],
    grad: &[Real],
    m: &mut [Real],
    v: &mut [Real],
    t: u64,
    lr: Real,
    cfg: &AdamWConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let (mh, vh) = (*m / bc1, *v / bc2);
        *p -= lr * (mh / (vh.sqrt() + cfg.eps)) + lr * cfg.weight_decay * *p;
    }
}

/// Moment estimates for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || store.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update every parameter; values stay single-precision representable.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: Real) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(shape_err("adamw_step", &[grads.len()], &[store.len()]));
        }
        for (p, g) in store.values().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err("adamw_step", g.shape(), p.shape()));
            }
        }
        self.t += 1;
        for (((p, g), m), v) in store.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            adamw_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, lr, &self.cfg);
            round_to_f32(p);
        }
        Ok(())
    }
}

/// `lr0 · decay^epoch`.
pub fn lr_at(lr0: Real, decay: Real, epoch: u64) -> Real {
    lr0 * decay.powf(epoch as Real)
}
