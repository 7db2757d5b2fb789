use std::sync::atomic::{AtomicU64, Ordering};

use crate::graph::Graph;
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            trainable: self.trainable.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        self.trainable.push(true);
        ParamId(self.tensors.len() - 1)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.set_grad(None);
        }
    }

    /// Adds the parameter-leaf gradients recorded in `graph` to the stored grads.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        let updates: Vec<(ParamId, Vec<f64>)> = graph.param_grads(self).map(|(id, g)| (id, g.to_vec())).collect();
        for (id, g) in updates {
            self.tensors[id.0].accumulate_grad_owned(g);
        }
    }

    /// Replaces the values of all tensors, keeping names; shapes must match.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), String> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| format!("missing parameter {name}"))?;
            let src = &other.tensors[j];
            if src.shape() != self.tensors[i].shape() {
                return Err(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                ));
            }
            self.tensors[i].data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub(crate) fn push_raw(&mut self, name: String, tensor: Tensor) {
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        self.trainable.push(true);
    }
}
