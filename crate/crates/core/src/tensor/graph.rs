//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and, when any
//! input requires a gradient, a [`Backward`] rule. [`Graph::backward`] walks the
//! tape in reverse insertion order, which is a valid topological order.

use super::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local derivative rule of one operation.
pub trait Backward<T: Real>: Send + Sync {
    /// Gradients for each input given the output gradient. `needs[i]` tells
    /// whether input `i` wants a gradient; return `None` otherwise.
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Appends an operation node. The rule is dropped when no input needs a gradient.
    pub fn push(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        op: impl Backward<T> + 'static,
    ) -> Var {
        let needs_grad = inputs.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: inputs.iter().map(|p| p.0).collect(),
            op: if needs_grad { Some(Box::new(op)) } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let shape = self.shape(root).to_vec();
        debug_assert_eq!(
            shape.iter().product::<usize>(),
            1,
            "backward needs a scalar root"
        );
        self.backward_with(root, Tensor::ones(&shape))
    }

    /// Back-propagates an explicit output gradient `seed` from `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Grads { grads };
        }
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].needs_grad)
                .collect();
            let local = op.backward(&g, &inputs, &node.value, &needs);
            for ((&p, lg), &need) in node.parents.iter().zip(local).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(lg) = lg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&lg),
                        slot @ None => *slot = Some(lg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

/// Result of a backward pass.
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
