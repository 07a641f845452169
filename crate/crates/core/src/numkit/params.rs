use indexmap::IndexMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// A named parameter tensor and whether the optimizer may touch it.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Ordered collection of named parameters.
///
/// Insertion order is preserved so that serialization and optimizer sweeps
/// are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: IndexMap<String, Param<F>>,
}

/// Gradients keyed by parameter name, as produced by a backward pass.
pub type Grads<F> = IndexMap<String, Tensor<F>>;

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Param { value, trainable: true });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.params.shift_remove(name).map(|p| p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if pred(k) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), trainable: p.trainable }))
                .collect(),
        }
    }

    /// Move every parameter of `other` into `self`, keeping names.
    pub fn extend(&mut self, other: ParamStore<F>) -> Result<()> {
        for (k, p) in other.params {
            if self.params.contains_key(&k) {
                return Err(Error::State(format!("duplicate parameter name {k}")));
            }
            self.params.insert(k, p);
        }
        Ok(())
    }

    /// Parameters whose names start with `prefix`, with the prefix kept.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }
}
