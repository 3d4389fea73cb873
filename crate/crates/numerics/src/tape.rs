//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value and a closure
//! that maps the upstream gradient to gradients of its inputs. Backward walks
//! the nodes in reverse append order, so the append order is a valid
//! topological order by construction.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the upstream gradient to one optional gradient per input.
///
/// The `needs` slice tells the closure which inputs actually require a
/// gradient so it can skip the work for the others.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that participates in differentiation.
    pub fn var(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Rc::new(value), Vec::new(), None, requires_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    /// Shared handle to the forward value of `v`.
    pub fn value_rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub(crate) fn push(
        &self,
        value: Rc<Tensor>,
        inputs: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records an op result; the backward closure is dropped when no input
    /// requires a gradient.
    pub(crate) fn record(&self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        self.push(
            Rc::new(value),
            inputs.iter().map(|v| v.0).collect(),
            backward,
            requires_grad,
        )
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(TensorError::arg(
                "backward",
                format!("root must be a scalar, got shape {:?}", root_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = backward(&upstream, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Leaves have no backward closure, so only their gradients survive
        // the sweep; interior gradients were taken above.
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf, if one reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
