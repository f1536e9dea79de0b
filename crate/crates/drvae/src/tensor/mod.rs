//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The graph is dynamic: every operation allocates a fresh node that owns its
//! values and a closure propagating gradients to its parents, so a forward
//! pass rebuilds the graph and dropping the result frees it. Nodes hold
//! strong references to parents only, which makes cycles impossible by
//! construction. Handles are `Rc`-backed and cheap to clone; the engine is
//! single-threaded by design (parallelism lives above it, one graph per
//! worker).
//!
//! Every operation validates shapes eagerly and checks its output for
//! NaN/Inf, so numerical failures surface at the op that produced them
//! rather than corrupting a training run downstream.

pub mod adam;
pub mod gradcheck;
pub mod nn;
mod ops;

pub use ops::stable_sigmoid;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&Node, &[f64])>;

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: RefCell<Vec<f64>>,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: Option<BackwardFn>,
}

/// Handle to a node in the computation graph. Scalars have shape `[]`,
/// vectors `[n]`, matrices `[rows, cols]` in row-major layout.
pub struct Tensor {
    pub(crate) node: Rc<Node>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("values", &self.node.values.borrow())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        if values.len() != numel_of(&shape) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("{} values for shape {:?}", values.len(), shape),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor".into() });
        }
        Ok(Tensor {
            node: Rc::new(Node {
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    /// Constant leaf (no gradient is tracked through it).
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(values, shape.to_vec(), false)
    }

    /// Trainable leaf: `backward` populates its gradient and the optimizer
    /// updates its values in place.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(values, shape.to_vec(), true)
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::new(vec![value], &[])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![0.0; numel_of(shape)], shape.to_vec(), false).expect("zeros are finite")
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Tensor::new(vec![value; numel_of(shape)], shape)
    }

    /// Interior node produced by an operation.
    pub(crate) fn op(
        name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(values.len(), numel_of(&shape));
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name.into() });
        }
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        Ok(Tensor {
            node: Rc::new(Node {
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward: if requires_grad { Some(backward) } else { None },
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Snapshot of the current values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.node.values.borrow().clone()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.node.values.borrow()[0]
    }

    /// Overwrite the stored values (used by optimizers and checkpoint loads).
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "set_values",
                detail: format!("{} values for shape {:?}", values.len(), self.shape()),
            });
        }
        self.node.values.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    /// Gradient if one was accumulated, zeros otherwise (a parameter that is
    /// unreachable from the loss has gradient zero).
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.node
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate(&self, contribution: &[f64]) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        let grad = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Backpropagate from a scalar loss, accumulating gradients into every
    /// reachable tensor that requires them. Leaves that do not require
    /// gradients are left untouched.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.requires_grad {
            return Ok(());
        }
        let order = topo_order(self);
        self.accumulate(&[1.0]);
        for tensor in order.iter().rev() {
            let grad = match tensor.node.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            if let Some(backward) = &tensor.node.backward {
                backward(&tensor.node, &grad);
            }
        }
        Ok(())
    }
}

/// Iterative post-order DFS over the gradient-requiring subgraph; reversing
/// the result yields a valid order for backpropagation (each node before its
/// parents).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut visited: HashSet<*const Node> = HashSet::new();
    let mut order: Vec<Tensor> = Vec::new();
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    visited.insert(Rc::as_ptr(&root.node));
    stack.push((root.clone(), 0));
    while let Some((tensor, next_parent)) = stack.pop() {
        if next_parent < tensor.node.parents.len() {
            let parent = tensor.node.parents[next_parent].clone();
            stack.push((tensor, next_parent + 1));
            if parent.node.requires_grad && visited.insert(Rc::as_ptr(&parent.node)) {
                stack.push((parent, 0));
            }
        } else {
            order.push(tensor);
        }
    }
    order
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub(crate) fn expect_matrix<'t>(op: &'static str, t: &'t Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::ShapeMismatch {
            op,
            detail: format!("expected a matrix, got shape {:?}", other),
        }),
    }
}
