use std::collections::BTreeMap;

use crate::autodiff::graph::{Bindings, Gradients};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn bind_into(&self, bindings: &mut Bindings) {
        for (k, v) in &self.tensors {
            bindings.insert(k.clone(), v.clone());
        }
    }

    /// Pulls the gradient of every stored parameter out of a backward pass.
    pub fn collect_grads(&self, grads: &Gradients) -> Result<ParamGrads> {
        self.tensors
            .keys()
            .map(|k| {
                grads
                    .input(k)
                    .cloned()
                    .map(|g| (k.clone(), g))
                    .ok_or_else(|| Error::UnboundInput(k.clone()))
            })
            .collect()
    }
}
