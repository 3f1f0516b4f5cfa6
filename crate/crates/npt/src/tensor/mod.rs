//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation records its parents in a dynamically built graph.
//! [`Tensor::backward`] walks that graph once in reverse topological order
//! and accumulates gradients additively into every reachable tensor that
//! was created with [`Tensor::param`]. Tensors are immutable after
//! construction; a training step therefore reads the gradients, computes
//! updated buffers, and replaces the parameter leaves wholesale, which also
//! guarantees each graph is backpropagated at most once.

mod backward;
mod gradcheck;
mod ops;
mod scalar;

pub use gradcheck::{
    gradcheck, gradcheck_skewed, op_checks, GradcheckOutcome, OpCheck, GRADCHECK_H, GRADCHECK_TOL,
};
pub use ops::{concat_last, dropout, stack};
pub use scalar::Scalar;

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NptError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Operation that produced a node; payload is whatever the backward pass
/// cannot rederive from the parent and output buffers.
#[derive(Debug)]
pub(crate) enum Op<T: Scalar> {
    Add,
    Sub,
    Mul,
    Scale(T),
    AddBias,
    Matmul,
    Permute(Vec<usize>),
    Reshape,
    ConcatLast,
    Stack,
    SelectAxis { axis: usize, index: usize },
    SoftmaxLast,
    LogSoftmaxLast,
    LayerNorm { eps: f64 },
    Gelu,
    SumAll,
}

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    /// Set once backward has traversed this node; guards double backprop.
    swept: Cell<bool>,
    op: Option<Op<T>>,
    parents: Vec<Tensor<T>>,
}

/// Shared handle to a graph node. Cloning is cheap and aliases the node.
pub struct Tensor<T: Scalar = f32>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_len<T>(shape: &[usize], data: &[T]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(NptError::shape(format!(
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            swept: Cell::new(false),
            op: None,
            parents: Vec::new(),
        }))
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        parents: Vec<Tensor<T>>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            swept: Cell::new(false),
            op: Some(op),
            parents,
        }))
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, &data)?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf; `backward` will populate its gradient.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, &data)?;
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![T::ZERO; numel], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(NptError::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Accumulated gradient; all-zero when the tensor was unreachable from
    /// the loss or backward has not run.
    pub fn grad(&self) -> Vec<T> {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![T::ZERO; self.numel()])
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    /// Clears the gradient and re-arms the node for another backward pass.
    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
        self.0.swept.set(false);
    }

    /// Copy of the values as a fresh constant leaf, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    pub(crate) fn node(&self) -> &Node<T> {
        &self.0
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[T]) {
        debug_assert_eq!(contribution.len(), self.numel());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

impl<T: Scalar> Node<T> {
    pub(crate) fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub(crate) fn data(&self) -> &[T] {
        &self.data
    }
    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.op.as_ref()
    }
    pub(crate) fn parents(&self) -> &[Tensor<T>] {
        &self.parents
    }
    pub(crate) fn swept(&self) -> &Cell<bool> {
        &self.swept
    }
    pub(crate) fn grad_slot(&self) -> &RefCell<Option<Vec<T>>> {
        &self.grad
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
