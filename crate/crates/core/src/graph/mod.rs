//! Minimal reverse-mode differentiation engine.
//!
//! Exactly the layers the localisation network needs: 3D convolution,
//! average-pool downsampling, nearest-neighbour upsampling, leaky-ReLU,
//! sigmoid, channel-wise spatial dropout, channel concatenation,
//! elementwise arithmetic, the weighted L2+L1 loss, and Adam.
//!
//! Tensors are cheap handles onto reference-counted nodes; every operation
//! records its parents so that [`Tensor::backward`] can walk the graph in
//! reverse topological order and accumulate exact gradients. Graphs are
//! confined to a single thread (`Rc` enforces this); training runs in
//! `f32`, the gradient-check suite instantiates the same ops in `f64`.

mod adam;
mod gradcheck;
mod ops;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{
    compare_grads, finite_diff_grads, grad_check, grad_check_kink_aware, GradCheckReport,
};
pub use ops::{
    add, avgpool2, concat_channels, conv1x1, conv3d, leaky_relu, mul_channel_gate, sigmoid,
    spatial_dropout, upsample_nn2, weighted_l2_l1_loss,
};

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Element type of the engine: `f32` for training, `f64` for verification.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + fmt::Debug + fmt::Display + Default + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an `f64` constant into the element type.
#[inline]
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    ShapeMismatch { op: &'static str, detail: String },
    /// Pooling requires even spatial dims.
    OddSpatialDim { op: &'static str, shape: Vec<usize> },
    /// backward() called on a tensor that is not a single element.
    NonScalarLoss { shape: Vec<usize> },
    BadProbability(f64),
    BadLossWeights { w2: f64, w1: f64 },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::ShapeMismatch { op, detail } => write!(f, "{op}: {detail}"),
            GraphError::OddSpatialDim { op, shape } => {
                write!(f, "{op}: spatial dims must be even, got {shape:?}")
            }
            GraphError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar, got shape {shape:?}")
            }
            GraphError::BadProbability(p) => write!(f, "probability must be in [0, 1), got {p}"),
            GraphError::BadLossWeights { w2, w1 } => {
                write!(f, "loss weights must be >= 0 and not both 0, got w2={w2} w1={w1}")
            }
        }
    }
}

impl std::error::Error for GraphError {}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// The operation that produced a tensor, holding its parents and any saved
/// state the backward rule needs.
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Conv3d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Conv1x1 {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    AvgPool2 {
        input: Tensor<T>,
    },
    UpsampleNn2 {
        input: Tensor<T>,
    },
    LeakyRelu {
        input: Tensor<T>,
        slope: T,
    },
    Sigmoid {
        input: Tensor<T>,
    },
    SpatialDropout {
        input: Tensor<T>,
        /// Survival flag per (batch, channel) slice.
        mask: Vec<bool>,
        scale: T,
    },
    ConcatChannels {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Add {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    MulChannelGate {
        input: Tensor<T>,
        gate: Tensor<T>,
    },
    L2L1Loss {
        pred: Tensor<T>,
        target: Tensor<T>,
        w2: T,
        w1: T,
    },
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3d {
                input,
                weight,
                bias,
            } => vec![input.clone(), weight.clone(), bias.clone()],
            Op::Conv1x1 {
                input,
                weight,
                bias,
            } => {
                let mut p = vec![input.clone(), weight.clone()];
                if let Some(b) = bias {
                    p.push(b.clone());
                }
                p
            }
            Op::AvgPool2 { input }
            | Op::UpsampleNn2 { input }
            | Op::LeakyRelu { input, .. }
            | Op::Sigmoid { input }
            | Op::SpatialDropout { input, .. } => vec![input.clone()],
            Op::ConcatChannels { a, b } | Op::Add { a, b } => vec![a.clone(), b.clone()],
            Op::MulChannelGate { input, gate } => vec![input.clone(), gate.clone()],
            Op::L2L1Loss { pred, target, .. } => vec![pred.clone(), target.clone()],
        }
    }
}

pub(crate) struct TensorInner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    op: Op<T>,
    requires_grad: bool,
}

/// An N-dimensional value in the computation graph. Cloning is cheap and
/// aliases the same node.
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn make(shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "tensor data length must match shape");
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                op,
                requires_grad,
            }),
        }
    }

    /// A constant leaf: participates in the graph but receives no gradient.
    pub fn leaf(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor::make(shape, data, Op::Leaf, false)
    }

    /// A trainable leaf: gradients accumulate here during backward.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor::make(shape, data, Op::Leaf, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::leaf(shape, vec![T::zero(); n])
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        // Inputs that can never receive gradients do not need their
        // history; dropping it lets intermediate buffers free early.
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor::make(shape, data, op, requires_grad)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw values (used by the optimiser and by
    /// checkpoint loading). Mutating a non-leaf invalidates its history.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        let data = self.inner.data.borrow();
        assert_eq!(data.len(), 1, "item() requires a scalar tensor");
        data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add `delta` into this tensor's gradient buffer.
    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [T])) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.inner.data.borrow().len()]);
        f(buf);
    }

    /// Reverse-mode differentiation from a scalar output.
    ///
    /// Walks the graph once in reverse topological order; gradients
    /// accumulate (+=) into every reachable tensor with `requires_grad`,
    /// so callers clear parameter gradients between steps.
    pub fn backward(&self) -> Result<(), GraphError> {
        if self.numel() != 1 {
            return Err(GraphError::NonScalarLoss {
                shape: self.inner.shape.clone(),
            });
        }
        let order = topo_order(self);
        self.accumulate_grad(|g| g[0] = g[0] + T::one());
        for node in order.iter().rev() {
            if node.requires_grad() {
                ops::backward_step(node);
            }
        }
        // Intermediate gradient buffers are only needed during the walk.
        for node in &order {
            if !matches!(node.inner.op, Op::Leaf) {
                *node.inner.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> TensorInner<T> {
    pub(crate) fn op(&self) -> &Op<T> {
        &self.op
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn op(&self) -> &Op<T> {
        self.inner.op()
    }
}

/// Sign pattern (>= 0) of every value feeding a leaky-ReLU in the graph.
///
/// Central finite differences are only valid when neither perturbed
/// evaluation crosses an activation kink; comparing the sign patterns of
/// the two evaluations detects exactly that. Node order is the
/// deterministic topological order from `root`.
pub fn leaky_relu_preact_signs<T: Scalar>(root: &Tensor<T>) -> Vec<bool> {
    let mut signs = Vec::new();
    for node in topo_order(root) {
        if let Op::LeakyRelu { input, .. } = node.op() {
            signs.extend(input.data().iter().map(|&v| v >= T::zero()));
        }
    }
    signs
}

/// Post-order DFS: every tensor appears after all of its parents.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (node, parents_pushed)
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        let parents = node.op().parents();
        stack.push((node, true));
        for p in parents {
            if !visited.contains(&p.id()) {
                stack.push((p, false));
            }
        }
    }
    order
}
