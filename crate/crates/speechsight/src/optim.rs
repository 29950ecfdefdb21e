//! AdamW with bias correction, decoupled weight decay, and linear warm-up.
//! Only trainable parameters move; a non-finite gradient rejects the whole
//! step before anything mutates.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the rate ramps linearly; 0 disables warm-up.
    pub warmup_steps: u64,
}

impl Default for AdamWParams {
    fn default() -> AdamWParams {
        AdamWParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
        }
    }
}

#[derive(Debug)]
pub enum OptimError {
    NonFiniteGradient { name: String },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NonFiniteGradient { name } => {
                write!(f, "non-finite gradient in {name}, step rejected")
            }
        }
    }
}

impl std::error::Error for OptimError {}

pub struct AdamW {
    hyper: AdamWParams,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(hyper: AdamWParams) -> AdamW {
        AdamW {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// The learning rate the NEXT step will use, after warm-up scaling.
    pub fn current_lr(&self) -> f64 {
        let t = self.step + 1;
        let warm = if self.hyper.warmup_steps == 0 {
            1.0
        } else {
            (t as f64 / self.hyper.warmup_steps as f64).min(1.0)
        };
        self.hyper.lr * warm
    }

    /// Applies one update from the gradients stored in `params`, then is
    /// ready for the next step. Gradients are left untouched; callers zero
    /// them between steps.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), OptimError> {
        for (name, p) in params.iter() {
            if p.trainable && p.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    name: name.to_string(),
                });
            }
        }
        self.step += 1;
        let t = self.step;
        let lr = self.current_lr_at(t);
        let bc1 = 1.0 - self.hyper.beta1.powi(t as i32);
        let bc2 = 1.0 - self.hyper.beta2.powi(t as i32);
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.dims()).expect("valid dims"));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.dims()).expect("valid dims"));
            let g = p.grad.data();
            let w = p.value.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..w.len() {
                md[i] = self.hyper.beta1 * md[i] + (1.0 - self.hyper.beta1) * g[i];
                vd[i] = self.hyper.beta2 * vd[i] + (1.0 - self.hyper.beta2) * g[i] * g[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                w[i] -= lr * (m_hat / (v_hat.sqrt() + self.hyper.eps)
                    + self.hyper.weight_decay * w[i]);
            }
        }
        Ok(())
    }

    fn current_lr_at(&self, t: u64) -> f64 {
        let warm = if self.hyper.warmup_steps == 0 {
            1.0
        } else {
            (t as f64 / self.hyper.warmup_steps as f64).min(1.0)
        };
        self.hyper.lr * warm
    }
}
