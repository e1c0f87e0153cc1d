//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op of one forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use super::element::Element;
use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn<E> = Box<dyn Fn(&BackCtx<'_, E>, &mut Grads<'_, E>)>;

pub(crate) struct Node<E> {
    pub shape: Shape,
    pub value: Vec<E>,
    pub requires_grad: bool,
    pub backward: Option<BackwardFn<E>>,
}

/// What a backward closure can read: its own output and upstream gradient,
/// plus every earlier node value.
pub(crate) struct BackCtx<'a, E> {
    pub gout: &'a [E],
    pub out: &'a [E],
    nodes: &'a [Node<E>],
}

impl<E> BackCtx<'_, E> {
    pub fn val(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }
}

/// Gradient buffers for the current sweep, allocated lazily.
pub(crate) struct Grads<'a, E> {
    nodes: &'a [Node<E>],
    bufs: &'a mut [Option<Vec<E>>],
}

impl<E: Element> Grads<'_, E> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient slot of `v`, or `None` when `v` needs no gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [E]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.bufs[v.0].get_or_insert_with(|| vec![E::zero(); n]))
    }

    pub fn add(&mut self, v: Var, g: &[E]) {
        if let Some(s) = self.slot(v) {
            for (a, &b) in s.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p, E: Element> {
    pub(crate) nodes: Vec<Node<E>>,
    params: Option<&'p ParamStore<E>>,
    param_vars: Vec<Option<Var>>,
    leaf_grads: Vec<Option<Vec<E>>>,
    grad_enabled: bool,
}

impl<E: Element> Default for Graph<'_, E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, E: Element> Graph<'p, E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            leaf_grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Graph whose `param` leaves read from `store`.
    pub fn with_params(store: &'p ParamStore<E>) -> Self {
        Graph {
            params: Some(store),
            param_vars: vec![None; store.len()],
            ..Self::new()
        }
    }

    /// Inference mode: no backward closures are recorded.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, shape: Shape, value: Vec<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf from a tensor; gradients are tracked iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor<E>) -> Var {
        self.push_leaf(t.shape().clone(), t.data().to_vec(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: impl Into<Shape>, value: Vec<E>) -> Result<Var> {
        let shape = shape.into();
        if shape.numel() != value.len() {
            return Err(Error::shape(
                "constant",
                format!("{} values for {shape}", value.len()),
            ));
        }
        Ok(self.push_leaf(shape, value, false))
    }

    pub fn constant_f64(&mut self, shape: impl Into<Shape>, value: &[f64]) -> Result<Var> {
        self.constant(shape, value.iter().map(|&v| E::of(v)).collect())
    }

    /// Leaf bound to a parameter; repeated requests return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("graph created without a parameter store");
        let t = store.get(id);
        let v = self.push_leaf(t.shape().clone(), t.data().to_vec(), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub(crate) fn push_op(
        &mut self,
        shape: Shape,
        value: Vec<E>,
        inputs: &[Var],
        backward: impl Fn(&BackCtx<'_, E>, &mut Grads<'_, E>) + 'static,
    ) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape.0
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shape matches its value")
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> E {
        self.nodes[v.0].value[0]
    }

    /// Reverse-mode sweep from the scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::clear_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", self.nodes[loss.0].shape),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::invalid(
                "backward: loss does not depend on any tensor that requires grad",
            ));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        let mut bufs: Vec<Option<Vec<E>>> = vec![None; loss.0 + 1];
        bufs[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = bufs[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.backward {
                Some(f) => {
                    let ctx = BackCtx {
                        gout: &g,
                        out: &node.value,
                        nodes: &self.nodes,
                    };
                    let mut grads = Grads {
                        nodes: &self.nodes,
                        bufs: &mut bufs,
                    };
                    f(&ctx, &mut grads);
                }
                None if node.requires_grad => match &mut self.leaf_grads[i] {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(&g) {
                            *a = *a + b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                },
                None => {}
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn clear_grads(&mut self) {
        self.leaf_grads.clear();
    }

    /// Gradients of every parameter leaf, indexed by parameter id.
    pub fn param_grads(&self) -> ParamGrads<E> {
        let mut out = ParamGrads::empty(self.param_vars.len());
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                out.0[pid] = self.grad(*v).map(<[E]>::to_vec);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let x = Tensor::<f64>::from_f64([2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap().with_grad();
        let mut g = Graph::new();
        let xv = g.input(&x);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_grad_is_two_x_and_accumulates() {
        let x = Tensor::<f64>::from_f64([3], &[1.0, -2.0, 3.0]).unwrap().with_grad();
        let mut g = Graph::new();
        let xv = g.input(&x);
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2.0, -4.0, 6.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[4.0, -8.0, 12.0]);
        g.clear_grads();
        assert!(g.grad(xv).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f64>::zeros([3]).with_grad();
        let mut g = Graph::new();
        let xv = g.input(&x);
        assert!(matches!(g.backward(xv), Err(Error::Shape { .. })));
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f32>::zeros([3]).with_grad();
        let mut g = Graph::new().no_grad();
        let xv = g.input(&x);
        let s = g.sum(xv);
        assert!(!g.requires_grad(s));
        assert!(g.backward(s).is_err());
    }
}
