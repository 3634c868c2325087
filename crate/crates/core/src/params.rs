//! Named parameter store shared by the encoder and the predictive pathway.
//!
//! Names are dotted paths. Everything under `encoder.` is needed at inference;
//! everything under `pathway.` exists only for pre-training. Iteration order is
//! the sorted name order, which keeps initialization draws, update order, and
//! checkpoint layout deterministic.

use std::collections::BTreeMap;

use crate::tensor::{Graph, Tensor, Var};

/// Prefix of tensors required to run the encoder (inference).
pub const ENCODER_PREFIX: &str = "encoder.";
/// Prefix of tensors used only during pre-training.
pub const PATHWAY_PREFIX: &str = "pathway.";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(self.tensors.contains_key(name), "unknown parameter {name}");
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Sorted (name, tensor) pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total scalar elements across tensors whose name starts with `prefix`.
    pub fn count_elements(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn any_with_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|n| n.starts_with(prefix))
    }

    /// New store holding only the tensors under `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Registers every tensor as a graph leaf, in sorted-name order.
    pub fn register(&self, graph: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(name, tensor)| (name.clone(), graph.leaf(tensor.clone(), trainable)))
            .collect();
        ParamVars { vars }
    }
}

/// Graph handles for a registered [`ParamStore`].
#[derive(Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Handle for a parameter that must exist; missing names are wiring bugs.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_elements_by_prefix() {
        let mut store = ParamStore::new();
        store.insert("encoder.a", Tensor::zeros(&[2, 3]));
        store.insert("encoder.b", Tensor::zeros(&[4]));
        store.insert("pathway.c", Tensor::zeros(&[5]));
        assert_eq!(store.count_elements(ENCODER_PREFIX), 10);
        assert_eq!(store.count_elements(PATHWAY_PREFIX), 5);
        assert_eq!(store.count_elements(""), 15);
    }

    #[test]
    fn filter_prefix_drops_others() {
        let mut store = ParamStore::new();
        store.insert("encoder.a", Tensor::zeros(&[1]));
        store.insert("pathway.b", Tensor::zeros(&[1]));
        let enc = store.filter_prefix(ENCODER_PREFIX);
        assert!(enc.contains("encoder.a"));
        assert!(!enc.contains("pathway.b"));
    }
}
