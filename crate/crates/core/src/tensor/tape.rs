//! Reverse-mode tape. Operations append nodes during the forward pass; the
//! backward pass walks the nodes in reverse, calling each node's adjoint
//! closure once. Summation order inside every kernel is fixed (row-major),
//! so results are reproducible for a given seed in single-threaded mode.

use std::collections::BTreeMap;

use super::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(super) usize);

pub(super) type BackFn<T> = Box<dyn FnOnce(&Tensor<T>, &mut GradTable<T>)>;

pub(super) struct GradTable<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradTable<T> {
    pub(super) fn accumulate(&mut self, var: Var, grad: Tensor<T>) {
        match &mut self.grads[var.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    back: Option<BackFn<T>>,
}

/// Gradients keyed by the leaf [`Var`]s that requested them.
pub struct Gradients<T> {
    by_var: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root w.r.t. `var`; zeros if no gradient flowed.
    pub fn get(&self, var: Var, like: &Tensor<T>) -> Tensor<T> {
        self.by_var
            .get(&var.0)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn try_get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&var.0)
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Leaf that participates in the backward pass (a trainable parameter
    /// or an input whose gradient the caller wants).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, None)
    }

    /// Leaf excluded from the backward pass (inputs, frozen parameters).
    /// Entire subgraphs built only from constants record no adjoints.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> T {
        let t = self.value(var);
        assert_eq!(t.numel(), 1, "expected scalar node, got shape {:?}", t.shape());
        t.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(super) fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(super) fn push(&mut self, value: Tensor<T>, requires_grad: bool, back: Option<BackFn<T>>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, requires_grad, back });
        Var(id)
    }

    /// Run the backward pass seeded with `d(root)/d(root) = 1` and consume
    /// the tape. `root` must be scalar.
    pub fn backward(mut self, root: Var) -> Gradients<T> {
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward root must be scalar");
        let mut table = GradTable { grads: (0..self.nodes.len()).map(|_| None).collect() };
        table.grads[root.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=root.0).rev() {
            let Some(grad) = table.grads[id].take() else { continue };
            if let Some(back) = self.nodes[id].back.take() {
                back(&grad, &mut table);
            } else if self.nodes[id].requires_grad {
                // Leaf: keep its gradient for the caller.
                table.grads[id] = Some(grad);
            }
        }
        let mut by_var = BTreeMap::new();
        for (id, slot) in table.grads.into_iter().enumerate() {
            if let Some(g) = slot {
                if self.nodes[id].requires_grad && self.nodes[id].back.is_none() {
                    by_var.insert(id, g);
                }
            }
        }
        Gradients { by_var }
    }
}
