use indexmap::IndexMap;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{contract_err, Result};

/// Ordered collection of named tensors. Insertion order is the order used
/// for checkpoints and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

/// Leaves created by [`ParamStore::bind`] for one forward pass.
pub struct Bound<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| contract_err!("no parameter named {name:?} is bound"))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| contract_err!("missing parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| contract_err!("missing parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.values_mut()
    }

    /// Total number of scalar entries in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.tensors
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    /// Adds every tensor in `other`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t)))
                .collect(),
        }
    }

    /// Adds the gradients from `grads` into each bound trainable tensor.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(&var) = bound.vars.get(name) else {
                continue;
            };
            match grads.get(var) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }
}
