//! Named parameter storage.
//!
//! A [`ParamStore`] maps unique names to tensors with a trainable flag.
//! Models resolve parameters to tape nodes through the [`ParamNodes`] trait:
//! [`StoreParams`] registers store values on a fresh [`Tape`] each forward
//! pass (the training path), while [`FixedParams`] serves pre-made leaf nodes
//! so a finite-difference checker can perturb parameters like any other
//! input. A `BTreeMap` keeps iteration order deterministic, which matters for
//! bit-identical optimizer updates and checkpoints.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// One named tensor with a trainable flag.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; the name must be unused.
    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        self.entries.insert(name.to_string(), Parameter { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Overwrites the tensor of an existing parameter (shape may not change).
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: cannot replace shape {:?} with {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Flips the trainable flag, e.g. to freeze a pretrained module.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        entry.trainable = trainable;
        Ok(())
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, entry) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                entry.trainable = false;
            }
        }
    }

    /// Copies every record of `other` into this store; names must not clash.
    pub fn absorb(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in other.iter() {
            self.insert(name, p.value.clone(), p.trainable)?;
        }
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Total number of scalar entries across trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Name-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Inserts the parameter's current value onto a tape; trainable
    /// parameters become gradient-requiring leaves, frozen ones constants.
    pub fn leaf(&self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        let p = self.get(name)?;
        Ok(tape.leaf(p.value.clone(), p.trainable))
    }
}

/// Resolves parameter names to tape nodes during a forward pass.
pub trait ParamNodes {
    fn node(&mut self, tape: &mut Tape, name: &str) -> Result<NodeId>;
}

/// [`ParamNodes`] backed by a [`ParamStore`]; each name is registered on the
/// tape once and memoized so gradients can be collected by name afterwards.
pub struct StoreParams<'a> {
    store: &'a ParamStore,
    ids: BTreeMap<String, NodeId>,
}

impl<'a> StoreParams<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, ids: BTreeMap::new() }
    }

    /// Collects gradients for all trainable bound parameters after a
    /// `backward` pass. Parameters that ended up off the loss path come back
    /// as zero tensors.
    pub fn gradients(&self, tape: &Tape) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.ids {
            let p = self.store.get(name)?;
            if !p.trainable {
                continue;
            }
            let g = match tape.grad(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.value.shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Tape node of a bound parameter, if it was used this pass.
    pub fn bound(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }
}

impl ParamNodes for StoreParams<'_> {
    fn node(&mut self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let id = self.store.leaf(tape, name)?;
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }
}

/// [`ParamNodes`] over pre-made leaves, for gradient checks that perturb
/// parameters externally.
pub struct FixedParams {
    pub map: BTreeMap<String, NodeId>,
}

impl ParamNodes for FixedParams {
    fn node(&mut self, _tape: &mut Tape, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn frozen_parameter_receives_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::full(&[2], 2.0), true).unwrap();
        store.insert("b", Tensor::full(&[2], 3.0), false).unwrap();
        let mut tape = Tape::new();
        let mut params = StoreParams::new(&store);
        let a = params.node(&mut tape, "a").unwrap();
        let b = params.node(&mut tape, "b").unwrap();
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        let grads = params.gradients(&tape).unwrap();
        assert!(grads.contains_key("a"));
        assert!(!grads.contains_key("b"));
        assert_eq!(grads["a"].data(), &[3.0, 3.0]);
    }

    #[test]
    fn store_params_memoizes_nodes() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[1]), true).unwrap();
        let mut tape = Tape::new();
        let mut params = StoreParams::new(&store);
        let n1 = params.node(&mut tape, "w").unwrap();
        let n2 = params.node(&mut tape, "w").unwrap();
        assert_eq!(n1, n2);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn set_value_shape_checked() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(store.set_value("w", Tensor::zeros(&[3])).is_err());
        assert!(store.set_value("w", Tensor::full(&[2, 2], 1.0)).is_ok());
    }

    #[test]
    fn freeze_prefix_only_touches_prefix() {
        let mut store = ParamStore::new();
        store.insert("tau.w", Tensor::zeros(&[1]), true).unwrap();
        store.insert("unet.w", Tensor::zeros(&[1]), true).unwrap();
        store.freeze_prefix("tau.");
        assert!(!store.get("tau.w").unwrap().trainable);
        assert!(store.get("unet.w").unwrap().trainable);
    }
}
