use std::collections::HashMap;

use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Trainable weights versus running statistics that are updated outside the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Leaf<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
    pub kind: LeafKind,
}

impl<T> Leaf<T> {
    /// Whether the optimizer may update this leaf.
    pub fn trainable(&self) -> bool {
        !self.frozen && self.kind == LeafKind::Weight
    }
}

/// Flat store of named parameter leaves. Names are hierarchical, dot separated.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    leaves: Vec<Leaf<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { leaves: Vec::new(), index: HashMap::new() }
    }

    /// Registers a leaf. Panics on a duplicate name: names are fixed by model construction.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, frozen: bool, kind: LeafKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.leaves.len());
        self.index.insert(name.clone(), id);
        self.leaves.push(Leaf { name, value, frozen, kind });
        id
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn leaf(&self, id: ParamId) -> &Leaf<T> {
        &self.leaves[id.0]
    }

    pub fn leaf_mut(&mut self, id: ParamId) -> &mut Leaf<T> {
        &mut self.leaves[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.leaves[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.leaves[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Leaf<T>)> {
        self.leaves.iter().enumerate().map(|(i, l)| (ParamId(i), l))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.leaves.len()).map(ParamId)
    }

    /// Total scalar count over leaves matching `pred`.
    pub fn count_scalars(&self, pred: impl Fn(&Leaf<T>) -> bool) -> usize {
        self.leaves.iter().filter(|l| pred(l)).map(|l| l.value.numel()).sum()
    }
}
