use std::collections::HashMap;

use crate::params::{LeafKind, ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule: `(grad_out, parent_values, output_value, parent_needs_grad) -> parent grads`.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Tape of one forward evaluation.
///
/// Parameters are read from a borrowed [`ParamStore`]; running-statistic
/// updates produced during a training-mode forward are queued and applied
/// with [`Graph::take_buffer_updates`] by the owner of the store.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    record: bool,
    training: bool,
    param_vars: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Training graph: records backward rules, batch statistics in normalization layers.
    pub fn training(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, true, true)
    }

    /// Inference graph: no backward rules, running statistics in normalization layers.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, false, false)
    }

    pub fn with_mode(params: &'p ParamStore<T>, record: bool, training: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            record,
            training,
            param_vars: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Input that receives a gradient when the graph records.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let rg = self.record;
        self.push_leaf(value, rg)
    }

    /// Parameter leaf. Frozen leaves and buffers are bound as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let leaf = self.params.leaf(id);
        let rg = self.record && !leaf.frozen && leaf.kind == LeafKind::Weight;
        let v = self.push_leaf(leaf.value.clone(), rg);
        self.param_vars.insert(id, v);
        v
    }

    /// Queue a new value for a buffer leaf (running statistics).
    pub fn queue_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let node = Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar output");
        self.backward_with(loss, Tensor::full(self.value(loss).shape().to_vec(), T::one()))
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(out).shape(), "seed gradient shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else { continue };
            let Some(go) = grads[i].take() else { continue };
            let parent_vals: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let pg = back(&go, &parent_vals, &node.value, &needs);
            debug_assert_eq!(pg.len(), node.parents.len());
            for ((&p, g), need) in node.parents.iter().zip(pg).zip(needs) {
                if !need {
                    continue;
                }
                if let Some(g) = g {
                    debug_assert_eq!(g.shape(), self.nodes[p].value.shape(), "gradient shape for node {p}");
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(go);
        }
        Gradients { grads, param_vars: self.param_vars.clone() }
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Gradients for every bound parameter that received one, ordered by id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.wrt(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
