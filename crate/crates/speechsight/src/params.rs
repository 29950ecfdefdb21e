//! Named parameter storage with per-tensor gradients and trainability flags.
//!
//! Iteration order is always lexicographic by name, which keeps optimizer
//! sweeps, checkpoint layout, and gradient checks deterministic.

use std::collections::BTreeMap;
use std::fmt;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub enum ParamError {
    Duplicate { name: String },
    Missing { name: String },
    Tensor(TensorError),
}

impl fmt::Display for ParamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamError::Duplicate { name } => write!(f, "parameter {name:?} already registered"),
            ParamError::Missing { name } => write!(f, "parameter {name:?} not found"),
            ParamError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ParamError {}

impl From<TensorError> for ParamError {
    fn from(e: TensorError) -> Self {
        ParamError::Tensor(e)
    }
}

/// One stored parameter: value, gradient accumulator, trainability.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered map from parameter name to [`Param`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a tensor under a fresh name. The gradient starts at zero.
    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<(), ParamError> {
        if self.entries.contains_key(name) {
            return Err(ParamError::Duplicate {
                name: name.to_string(),
            });
        }
        let grad = Tensor::zeros(value.dims())?;
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad,
                trainable,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param, ParamError> {
        self.entries.get(name).ok_or_else(|| ParamError::Missing {
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param, ParamError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| ParamError::Missing {
                name: name.to_string(),
            })
    }

    /// Shorthand for the value tensor of `name`.
    pub fn value(&self, name: &str) -> Result<&Tensor, ParamError> {
        Ok(&self.get(name)?.value)
    }

    /// Accumulates `scale * grad` into the gradient of `name`.
    pub fn acc_grad(&mut self, name: &str, grad: &Tensor, scale: f64) -> Result<(), ParamError> {
        let p = self.get_mut(name)?;
        p.grad.add_scaled(grad, scale)?;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Lexicographic iteration over (name, param).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across trainable tensors.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Marks exactly the parameters whose name starts with `prefix` trainable,
    /// everything else frozen.
    pub fn set_trainable_by_prefix(&mut self, prefix: &str) {
        for (name, p) in self.entries.iter_mut() {
            p.trainable = name.starts_with(prefix);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Flips trainability on the parameters whose name starts with `prefix`,
    /// leaving the rest as they are. Layers extra freezes over a stage mask.
    pub fn set_trainable_matching(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Snaps every value to its nearest `f32`, stored back as `f64`.
    ///
    /// Training calls this after initialization and after every optimizer
    /// step so that checkpoints (32-bit payload) round-trip without loss.
    pub fn snap_to_f32(&mut self) {
        for p in self.entries.values_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// True when every gradient of every trainable parameter is finite.
    pub fn grads_finite(&self) -> bool {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .all(|p| p.grad.all_finite())
    }
}
