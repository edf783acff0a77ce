//! Dense double-precision tensors with a reverse-mode differentiation tape.
//!
//! A [`Tape`] records every differentiable operation whose inputs touch it.
//! [`Tensor`]s are immutable after construction; gradients are accumulated on
//! the tape during [`Tensor::backward`] and read back through leaf handles.
//! There is no broadcasting beyond scalars: shape mismatches are errors.

mod ops;
pub mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport, LeafReport};

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: channel mismatch, {expected} expected but got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("conv2d: kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("max_over_channel: empty channel dimension")]
    EmptyChannels,
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tape already consumed; build a fresh tape per pass")]
    TapeConsumed,
    #[error("backward: loss is not attached to any tape")]
    NoTape,
    #[error("{0}: operands live on different tapes")]
    TapeMismatch(&'static str),
    #[error("reshape: cannot view {len} elements as {shape:?}")]
    BadReshape { len: usize, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Adjoint accumulator handed to backward closures. Slot `id` holds the
/// gradient of the loss with respect to tape node `id`.
pub(crate) struct Adjoints {
    slots: Vec<Option<Vec<f64>>>,
}

impl Adjoints {
    pub(crate) fn slot(&mut self, id: usize, len: usize) -> &mut [f64] {
        self.slots[id].get_or_insert_with(|| vec![0.0; len])
    }
}

type BackFn = Box<dyn Fn(&[f64], &mut Adjoints)>;

struct Node {
    len: usize,
    /// `None` marks a leaf; leaves retain their gradient after backward.
    backward: Option<BackFn>,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    consumed: Cell<bool>,
}

/// Single-threaded operation record. Cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                grads: RefCell::new(Vec::new()),
                consumed: Cell::new(false),
            }),
        }
    }

    /// Registers a differentiable leaf (`requires_grad` input) on this tape.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf: shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        let id = self.push(data.len(), None);
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn consumed(&self) -> bool {
        self.inner.consumed.get()
    }

    fn push(&self, len: usize, backward: Option<BackFn>) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node { len, backward });
        self.inner.grads.borrow_mut().push(None);
        nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// Dense row-major tensor, double precision. Cloning shares storage.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Constant (non-differentiable) tensor.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "constant: shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![0.0; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// True for tensors participating in differentiation (leaf or derived).
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        match &self.node {
            Some(n) => n.tape.inner.nodes.borrow()[n.id].backward.is_none(),
            None => false,
        }
    }

    /// Gradient populated by the last `backward` pass, if this is a leaf
    /// reached by it. Leaves not reachable from the loss get a zero gradient.
    pub fn grad(&self) -> Option<Vec<f64>> {
        let n = self.node.as_ref()?;
        n.tape.inner.grads.borrow()[n.id].clone()
    }

    /// Runs reverse-mode accumulation from this scalar loss, populating the
    /// gradient of every leaf on the tape. Consumes the tape: a second
    /// backward on the same tape is an error.
    pub fn backward(&self) -> Result<()> {
        let node = self.node.as_ref().ok_or(TensorError::NoTape)?;
        if self.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape.clone()));
        }
        let tape = &node.tape;
        if tape.inner.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = tape.inner.nodes.borrow();
        let mut adj = Adjoints {
            slots: vec![None; node.id + 1],
        };
        adj.slots[node.id] = Some(vec![1.0]);
        for id in (0..=node.id).rev() {
            let Some(g) = adj.slots[id].take() else {
                continue;
            };
            match &nodes[id].backward {
                Some(back) => back(&g, &mut adj),
                None => tape.inner.grads.borrow_mut()[id] = Some(g),
            }
        }
        // Leaves the loss never touched still report a (zero) gradient.
        let mut grads = tape.inner.grads.borrow_mut();
        for (id, n) in nodes.iter().enumerate() {
            if n.backward.is_none() && grads[id].is_none() {
                grads[id] = Some(vec![0.0; n.len]);
            }
        }
        Ok(())
    }

    fn tape_of(inputs: &[&Tensor], op: &'static str) -> Result<Option<Tape>> {
        let mut found: Option<&Tape> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match found {
                    None => found = Some(&n.tape),
                    Some(f) if f.same(&n.tape) => {}
                    Some(_) => return Err(TensorError::TapeMismatch(op)),
                }
            }
        }
        Ok(found.cloned())
    }

    fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Wraps freshly computed forward data as an output of `tape` (when any
    /// input was differentiable) with the given backward closure.
    fn make_output(
        shape: Vec<usize>,
        data: Vec<f64>,
        tape: Option<Tape>,
        backward: BackFn,
    ) -> Tensor {
        let node = tape.map(|tape| {
            let id = tape.push(data.len(), Some(backward));
            NodeRef { tape, id }
        });
        Tensor {
            shape,
            data: Rc::new(data),
            node,
        }
    }
}
