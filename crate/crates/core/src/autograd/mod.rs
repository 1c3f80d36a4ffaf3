//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Graph`]. [`Graph::backward`] walks the tape once in exact reverse
//! execution order, so a graph can be differentiated only once; call
//! [`Graph::reset`] to clear gradients before differentiating again.

mod gradcheck;
mod ops;

pub use gradcheck::{analytic_gradient, finite_diff_gradcheck, numeric_gradient, GradcheckReport, InputReport, DENOMINATOR_GUARD};

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait BackwardOp<T> {
    /// Gradients with respect to each input, in input order. `None` means
    /// the input receives no gradient from this op.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T> {
    op_name: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    op: Option<Box<dyn BackwardOp<T>>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

struct Tape<T> {
    nodes: Vec<Node<T>>,
    differentiated: bool,
}

/// Record of executed operations. Cloning shares the same tape.
pub struct Graph<T> {
    tape: Rc<RefCell<Tape<T>>>,
}

impl<T> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Self {
            tape: Rc::clone(&self.tape),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node in a [`Graph`].
pub struct Var<T> {
    graph: Graph<T>,
    id: usize,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            graph: self.graph.clone(),
            id: self.id,
        }
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tape = self.graph.tape.borrow();
        let node = &tape.nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op_name)
            .field("shape", &node.value.shape())
            .finish()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            tape: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                differentiated: false,
            })),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<T> {
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(node);
        Var {
            graph: self.clone(),
            id: tape.nodes.len() - 1,
        }
    }

    /// Adds a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<T> {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.push(Node {
            op_name: "leaf",
            value,
            parents: Vec::new(),
            op: None,
            requires_grad,
            grad: None,
        })
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<T> {
        self.leaf(tensor.detached())
    }

    pub(crate) fn record(
        &self,
        op_name: &'static str,
        value: Tensor<T>,
        parents: &[&Var<T>],
        op: impl BackwardOp<T> + 'static,
    ) -> Result<Var<T>> {
        if parents.iter().any(|p| !Rc::ptr_eq(&p.graph.tape, &self.tape)) {
            return Err(Error::GraphMismatch);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = {
            let tape = self.tape.borrow();
            parents.iter().any(|p| tape.nodes[p.id].requires_grad)
        };
        let op: Option<Box<dyn BackwardOp<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        Ok(self.push(Node {
            op_name,
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            op,
            requires_grad,
            grad: None,
        }))
    }

    /// Reverse pass from a scalar `loss`, populating the gradient of every
    /// node that requires one and is reachable from the loss.
    pub fn backward(&self, loss: &Var<T>) -> Result<()> {
        if !Rc::ptr_eq(&loss.graph.tape, &self.tape) {
            return Err(Error::GraphMismatch);
        }
        let mut tape = self.tape.borrow_mut();
        if tape.differentiated {
            return Err(Error::StaleGraph);
        }
        let loss_shape = tape.nodes[loss.id].value.shape().to_vec();
        if tape.nodes[loss.id].value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        tape.differentiated = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..tape.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &tape.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[id].as_ref() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &tape.nodes[p].value).collect();
            let parent_grads = op.backward(&inputs, &node.value, g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !tape.nodes[p].requires_grad {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                    None => grads[p] = Some(pg),
                }
            }
        }
        for (node, g) in tape.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if node.op.is_none() && node.requires_grad {
                    node.value.set_grad(g.clone())?;
                }
                node.grad = Some(g);
            }
        }
        Ok(())
    }

    /// Clears all gradients so the graph can be differentiated again.
    pub fn reset(&self) {
        let mut tape = self.tape.borrow_mut();
        tape.differentiated = false;
        for node in &mut tape.nodes {
            node.grad = None;
            node.value.zero_grad();
        }
    }
}

impl<T: Scalar> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub(crate) fn tensor_ref(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.graph.tape.borrow(), |t| &t.nodes[self.id].value)
    }

    /// Copy of the node's value (without gradient state).
    pub fn value(&self) -> Tensor<T> {
        self.tensor_ref().detached()
    }

    /// The node's tensor including its populated gradient, for leaves.
    pub fn tensor(&self) -> Tensor<T> {
        self.tensor_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor_ref().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tape.borrow().nodes[self.id].requires_grad
    }

    /// Single element of a one-element node.
    pub fn item(&self) -> T {
        let t = self.tensor_ref();
        assert_eq!(t.len(), 1, "item() on non-scalar of shape {:?}", t.shape());
        t.data()[0]
    }

    /// Gradient accumulated by the last reverse pass.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let tape = self.graph.tape.borrow();
        let node = &tape.nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape mirrors value"))
    }
}
