//! Named parameter storage shared by every trainable module.
//!
//! A model owns a [`ParamStore`] plus typed [`ParamId`]s for its weights.
//! Each forward pass binds the store into a graph once ([`GradGraph::bind`]
//! via [`Binding::bind`]), keeping optimizer state, gradients and
//! checkpoints aligned by insertion order.

use crate::graph::{GradGraph, Gradients, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Flattens every parameter into one vector, in store order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.total_elements());
        for t in &self.tensors {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    /// Overwrites every parameter from a flat vector, in store order.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_elements());
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// Per-graph leaf ids for one store, aligned with store order.
pub struct Binding {
    ids: Vec<NodeId>,
}

impl Binding {
    /// Binds all parameters as trainable leaves.
    pub fn bind(graph: &mut GradGraph, store: &ParamStore) -> Binding {
        let ids = store
            .tensors()
            .iter()
            .map(|t| graph.trainable(t.clone()))
            .collect();
        Binding { ids }
    }

    /// Binds all parameters as constants (frozen forward passes).
    pub fn bind_frozen(graph: &mut GradGraph, store: &ParamStore) -> Binding {
        let ids = store
            .tensors()
            .iter()
            .map(|t| graph.constant(t.clone()))
            .collect();
        Binding { ids }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.ids[id.0]
    }

    /// Gradients for every bound parameter, in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.ids.iter().map(|&id| grads.get(id)).collect()
    }
}
