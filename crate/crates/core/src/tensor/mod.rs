//! Dense NCHW tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value. Ops executed while gradient recording is
//! enabled (the default) and with at least one input that requires a gradient
//! record a backward closure on their output; [`Tensor::backward`] replays those
//! closures in reverse creation order through a [`Tape`].

mod autograd;
mod conv;
pub mod gradcheck;
mod layout;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::Scalar;

pub use autograd::{grad_enabled, no_grad, Tape};
pub use conv::Conv2dSpec;
pub use layout::{window_partition, window_reverse, Pad2d, ZERO_INDEX};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Divisibility { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    Argument { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err<X>(op: &'static str, detail: impl Into<String>) -> Result<X> {
    Err(TensorError::Shape { op, detail: detail.into() })
}

/// Gradient contributions returned by a backward closure, one per op input.
pub(crate) type InputGrads<T> = Vec<Option<Vec<T>>>;

pub(crate) struct BackwardArgs<'a, T: Scalar> {
    pub grad: &'a [T],
    pub out: &'a [T],
    pub inputs: &'a [Tensor<T>],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> InputGrads<T> + Send + Sync>;

pub(crate) struct Node<T: Scalar> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor<T: Scalar>(Arc<Inner<T>>);

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if let Some(node) = &self.0.node {
            d.field("op", &node.op);
        }
        if self.numel() <= 16 {
            d.field("data", &self.0.data);
        }
        d.finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node: None,
        }))
    }

    /// Constant leaf. Fails if `data.len()` disagrees with `shape` or any value
    /// is non-finite.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("from_vec", format!("shape {shape:?} holds {n} values, got {}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(t.requires_grad_(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![], vec![value], false)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::lit(v)
            })
            .collect();
        Self::leaf(shape.to_vec(), data, false)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.random_range(lo..hi))).collect();
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Records an op output. The output participates in differentiation only
    /// when recording is enabled and some input requires a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}");
        if !all_finite(&data) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node { op, inputs, backward });
        Ok(Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        })))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the op that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.0.node.as_ref()
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// New leaf sharing values with `self`, detached from any graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// New leaf with the same values and the given gradient flag.
    pub fn requires_grad_(&self, flag: bool) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), flag)
    }

    /// Detached copy converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::leaf(self.0.shape.clone(), data, self.0.requires_grad)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// `v - v` is zero for finite `v` and NaN otherwise; eight independent lanes
/// let the check vectorise.
#[allow(clippy::eq_op)]
pub(crate) fn all_finite<T: Scalar>(data: &[T]) -> bool {
    let mut lanes = [T::zero(); 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l += v - v;
        }
    }
    tail.iter().all(|v| v.is_finite()) && lanes.iter().all(|&l| l == T::zero())
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
