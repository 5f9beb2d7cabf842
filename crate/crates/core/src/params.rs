//! Named parameter storage and its binding into a [`Graph`].

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by hierarchical name, e.g. `backbone/blocks.3.qkv.w`.
/// Iteration order is the sorted key order, which keeps every traversal
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
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
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Sub-store of every entry whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` into `self`, replacing existing ones.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// FNV-1a hash of the raw bytes of every entry under `prefix`,
    /// including names and shapes.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (k, v) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            feed(k.as_bytes());
            for d in v.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for x in v.data() {
                feed(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Graph handles for a [`ParamStore`] bound into one graph.
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Inserts every parameter as a leaf; those for which `trainable`
    /// returns true require gradients.
    pub fn new(graph: &mut Graph, params: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| (k.clone(), graph.leaf(v.clone(), trainable(k))))
            .collect();
        Bound { vars }
    }

    /// Binds a second store into the same graph; names already bound keep
    /// their first binding.
    pub fn extend(&mut self, graph: &mut Graph, params: &ParamStore, trainable: impl Fn(&str) -> bool) {
        for (k, v) in params.iter() {
            if !self.vars.contains_key(k) {
                let var = graph.leaf(v.clone(), trainable(k));
                self.vars.insert(k.clone(), var);
            }
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients of all trainable parameters after `graph.backward`.
    /// Parameters that did not influence the loss get a zero gradient.
    pub fn grads(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, v)| graph.requires_grad(**v))
            .map(|(k, v)| {
                let g = graph
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(*v)));
                (k.clone(), g)
            })
            .collect()
    }
}
