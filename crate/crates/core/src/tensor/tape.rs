use std::collections::HashMap;

use super::ops::{backward_op, Op};
use super::params::{BufferId, ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Record of one forward pass.
///
/// Tapes are explicit and short-lived: build one per forward pass, call
/// [`Tape::backward`] once, and hand the result to
/// [`ParamStore::absorb`]. A tape optionally borrows the parameter store it
/// reads weights from; parameters are bound lazily and at most once.
pub struct Tape<'s, T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    store: Option<&'s ParamStore<T>>,
    bound: HashMap<ParamId, Var>,
    stat_updates: Vec<(BufferId, Tensor<T>)>,
}

impl<T: Real> Tape<'static, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            bound: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }
}

impl<T: Real> Default for Tape<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Real> Tape<'s, T> {
    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Tape {
            nodes: Vec::new(),
            store: Some(store),
            bound: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store.expect("tape has no parameter store")
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Bind a parameter of the borrowed store onto the tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.store().param(id).value.clone();
        let v = self.push_with(value, Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    /// Queue a replacement value for a buffer, applied by [`ParamStore::absorb`].
    pub fn record_buffer(&mut self, id: BufferId, value: Tensor<T>) {
        self.stat_updates.push((id, value));
    }

    /// Current value of a buffer: the latest queued update, else the store's.
    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        match self.stat_updates.iter().rev().find(|(b, _)| *b == id) {
            Some((_, t)) => t,
            None => &self.store().buffer(id).value,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop the tape, keeping only the queued buffer updates.
    pub fn into_stat_updates(self) -> Gradients<T> {
        Gradients {
            leaves: Vec::new(),
            params: Vec::new(),
            stat_updates: self.stat_updates,
        }
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Nodes are stored in creation order, which is a topological order, so
    /// walking indices downward visits each node exactly once after all of
    /// its consumers.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(shape, T::ONE));

        let mut leaves = Vec::new();
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => leaves.push((Var(i), g)),
                Op::Param(id) => params.push((*id, g)),
                op => backward_op(op, &self.nodes, i, g, &mut grads),
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            leaves,
            params,
            stat_updates: self.stat_updates,
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    leaves: Vec<(Var, Tensor<T>)>,
    params: Vec<(ParamId, Tensor<T>)>,
    stat_updates: Vec<(BufferId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of an [`Tape::input`] leaf; `None` if unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub(crate) fn stat_updates(&self) -> impl Iterator<Item = (BufferId, &Tensor<T>)> {
        self.stat_updates.iter().map(|(id, t)| (*id, t))
    }
}

/// Add `g` into the gradient slot of `v` if `v` participates in differentiation.
pub(crate) fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    g: Tensor<T>,
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
