//! Named parameters and their store.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{IvaError, Result};
use crate::tensor::Tensor;

/// A trainable (or frozen) named tensor. Frozen parameters receive zero
/// updates from any optimizer step.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Owns every parameter of a model. Components refer to parameters by
/// [`ParamId`], so sharing a parameter between call sites is sharing the
/// storage, not a copy.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(IvaError::State(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(),
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    /// Set frozen flags from a trainability predicate on parameter names.
    pub fn freeze_except(&mut self, trainable: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.frozen = !trainable(&p.name);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Snapshot of raw values, for bitwise freeze checks.
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.data().to_vec()))
            .collect()
    }
}

// ── Initializers ────────────────────────────────────────────────────────

pub fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}

pub fn ones(shape: Vec<usize>) -> Tensor {
    let numel = shape.iter().product();
    Tensor::new(shape, vec![1.0; numel]).expect("consistent shape")
}

pub fn normal_init(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Normal init scaled by fan-in and fan-out of a `rows x cols` matrix.
pub fn xavier_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal_init(rng, vec![rows, cols], std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(vec![2])).unwrap();
        let err = store.add("w", Tensor::zeros(vec![2])).unwrap_err();
        assert!(matches!(err, IvaError::State(_)));
    }

    #[test]
    fn freeze_predicate() {
        let mut store = ParamStore::new();
        let a = store.add("tok.w", Tensor::zeros(vec![1])).unwrap();
        let b = store.add("host.w", Tensor::zeros(vec![1])).unwrap();
        store.freeze_except(|name| name.starts_with("tok."));
        assert!(!store.get(a).frozen);
        assert!(store.get(b).frozen);
    }
}
