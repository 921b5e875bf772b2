//! Minimal reverse-mode autodiff on dense row-major tensors.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a graph node. Operators in
//! [`ops`] build the graph eagerly; [`Tensor::backward`] walks it once in
//! reverse creation order, which is a valid topological order because an
//! operation's output is always created after its inputs.
//!
//! Gradients of interior nodes are recomputed from scratch on every
//! `backward` call, while leaf gradients accumulate until explicitly
//! cleared — so two consecutive `backward` calls leave leaves holding
//! exactly twice the gradient.

pub mod format;
pub mod gradcheck;
pub mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::real::Real;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Errors raised by tensor construction and the operators in [`ops`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Payload length does not match the product of the extents.
    DataLength { expected: usize, got: usize },
    /// Two operands disagree in shape where they must match.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Operand has the wrong rank for this operator.
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    /// An extent is invalid for the requested operation (zero output size,
    /// channel mismatch, kernel larger than padded input, ...).
    BadExtent { op: &'static str, detail: String },
    /// `backward` was called on a tensor that is not a single element.
    NotScalar { shape: Vec<usize> },
    /// A label map carries a class id outside `0..=classes`.
    ClassOutOfRange { class: u8, classes: usize },
    /// Label map extents do not match the logits they are scored against.
    LabelSize {
        expected: (usize, usize),
        got: (usize, usize),
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape (want {expected})")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            TensorError::RankMismatch { op, expected, got } => {
                write!(f, "{op}: expected rank {expected}, got shape {got:?}")
            }
            TensorError::BadExtent { op, detail } => write!(f, "{op}: {detail}"),
            TensorError::NotScalar { shape } => {
                write!(f, "backward needs a single-element tensor, got shape {shape:?}")
            }
            TensorError::ClassOutOfRange { class, classes } => {
                write!(f, "label {class} outside valid range 0..={classes}")
            }
            TensorError::LabelSize { expected, got } => {
                write!(
                    f,
                    "label map is {}x{}, expected {}x{}",
                    got.0, got.1, expected.0, expected.1
                )
            }
        }
    }
}

impl std::error::Error for TensorError {}

type BackwardFn<T> = Box<dyn Fn(&[T])>;

struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    /// Shared storage: `detach` hands out a second node over the same buffer.
    data: Rc<RefCell<Vec<T>>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    /// Receives this node's gradient and accumulates into the parents.
    backward: Option<BackwardFn<T>>,
}

/// Handle onto one node of the autodiff graph.
pub struct Tensor<T: Real> {
    node: Rc<Node<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize, TensorError> {
    let mut n: usize = 1;
    for &e in shape {
        n = n.checked_mul(e).ok_or(TensorError::BadExtent {
            op: "new",
            detail: format!("shape {shape:?} overflows"),
        })?;
    }
    Ok(n)
}

impl<T: Real> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: Rc::new(RefCell::new(data)),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Leaf tensor that does not participate in gradients.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(TensorError::DataLength {
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// Leaf tensor tracked by the graph — gradients accumulate here.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let t = Self::new(shape, data)?;
        // Freshly built, sole owner — safe to flip the flag via rebuild.
        let node = Rc::try_unwrap(t.node).ok().expect("sole owner");
        Ok(Tensor {
            node: Rc::new(Node {
                requires_grad: true,
                ..node
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = checked_numel(shape).expect("shape overflow");
        Self::build(shape.to_vec(), vec![T::zero(); n], false, Vec::new(), None)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![1], vec![v], false, Vec::new(), None)
    }

    /// Graph-internal constructor used by the operators.
    ///
    /// When no parent tracks gradients the closure and the parent edges are
    /// dropped on the spot, so inference-only forwards never grow a graph.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) + 'static,
    ) -> Self {
        debug_assert_eq!(
            checked_numel(&shape).unwrap(),
            data.len(),
            "operator produced wrong payload size"
        );
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        if requires_grad {
            Self::build(shape, data, true, parents, Some(Box::new(backward)))
        } else {
            Self::build(shape, data, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    /// Borrow the raw row-major payload.
    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Mutable borrow of the payload. Meant for optimizers and initializers;
    /// mutating a tensor that is part of a live graph invalidates any saved
    /// forward values, so only touch leaves between steps.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Extract the value of a single-element tensor.
    pub fn value(&self) -> T {
        assert_eq!(self.numel(), 1, "value() on non-scalar {:?}", self.shape());
        self.node.data.borrow()[0]
    }

    /// Replace the payload (same length required).
    pub fn set_data(&self, new: &[T]) -> Result<(), TensorError> {
        let mut d = self.node.data.borrow_mut();
        if d.len() != new.len() {
            return Err(TensorError::DataLength {
                expected: d.len(),
                got: new.len(),
            });
        }
        d.copy_from_slice(new);
        Ok(())
    }

    /// Current gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Zero-initialize on first touch, then add.
    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut slot = self.node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        debug_assert_eq!(buf.len(), delta.len());
        for (b, d) in buf.iter_mut().zip(delta) {
            *b = *b + *d;
        }
    }

    /// Like [`Self::accumulate_grad`] but hands the closure a zero-initialized
    /// buffer to scatter into, avoiding a temporary.
    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [T])) {
        let mut slot = self.node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        f(buf);
    }

    /// View of the same storage outside the graph: shares the data buffer
    /// (zero copy) but has no parents and never requires a gradient.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape: self.node.shape.clone(),
                data: Rc::clone(&self.node.data),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Reverse-mode sweep from a single-element tensor.
    ///
    /// Interior gradients are rebuilt from zero on every call; leaves keep
    /// accumulating. Returns an error if `self` holds more than one element.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.node.shape.clone(),
            });
        }

        // Everything reachable through grad-requiring parents.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.node.id) {
                for p in &t.node.parents {
                    if p.node.requires_grad {
                        stack.push(p.clone());
                    }
                }
                nodes.push(t);
            }
        }

        // Interior nodes restart from zero so repeated sweeps stay exact.
        for n in &nodes {
            if n.node.backward.is_some() {
                *n.node.grad.borrow_mut() = Some(vec![T::zero(); n.numel()]);
            }
        }
        self.accumulate_grad(&[T::one()]);

        // Children always carry larger ids than their parents, so descending
        // id order is a topological order of the reversed graph.
        nodes.sort_by(|a, b| b.node.id.cmp(&a.node.id));
        for n in &nodes {
            if let Some(back) = &n.node.backward {
                let slot = n.node.grad.borrow();
                let g = slot.as_ref().expect("interior grad was just initialized");
                back(g);
            }
        }
        Ok(())
    }
}
