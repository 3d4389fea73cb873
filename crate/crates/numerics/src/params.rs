use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters keyed by dotted path, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}

/// Lazily binds store parameters onto a tape: trainable entries become
/// differentiable leaves, frozen entries become constants.
pub struct Binder<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every bound trainable parameter that the root reached.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(name, _)| self.store.get(name).map(|p| p.trainable).unwrap_or(false))
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::zeros(&[2]), true).unwrap();
        assert_eq!(
            store.insert("a.w", Tensor::zeros(&[2]), false),
            Err(TensorError::DuplicateParameter("a.w".into()))
        );
    }

    #[test]
    fn frozen_parameters_are_constants() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0), true).unwrap();
        store.insert("f", Tensor::scalar(3.0), false).unwrap();
        let tape = Tape::new();
        let binder = Binder::new(&tape, &store);
        let w = binder.param("w").unwrap();
        let f = binder.param("f").unwrap();
        assert_eq!(binder.param("w").unwrap(), w);
        let y = tape.mul(w, f).unwrap();
        let grads = tape.backward(y).unwrap();
        let named = binder.gradients(&grads);
        assert_eq!(named.len(), 1);
        assert_eq!(named["w"].item(), 3.0);
        assert_eq!(store.trainable_count(), 1);
    }
}
