//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The design is a single-threaded tape: every differentiable operation
//! produces a fresh tensor whose node records the operation kind and handles
//! to its inputs. [`backward`](crate::tensor::backward::backward) walks that
//! graph once in reverse topological order. Tensors are immutable once an op
//! has written them; only leaf tensors (parameters, buffers) may be updated
//! in place between steps, via [`Tensor::with_data_mut`].
//!
//! Kernels are deliberately sequential with a fixed reduction order, so a
//! given input and seed produce bitwise-identical results on every run.

mod backward;
pub mod gemm;
pub mod gradcheck;
mod ops;

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

pub use backward::backward;

/// Element types the engine supports. Training runs in `f32`; the
/// finite-difference oracle runs the same generic code in `f64`.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with tape recording disabled (inference / data paths).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// The recorded operation that produced a tensor. `None` marks a leaf.
///
/// Variants hold handles to their inputs (keeping the subgraph alive) plus
/// whatever forward-pass context the gradient rule needs.
pub(crate) enum Op<S: Scalar> {
    None,
    Add(Tensor<S>, Tensor<S>),
    Sub(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    Div(Tensor<S>, Tensor<S>),
    /// Elementwise minimum; ties route the gradient to the left input.
    Min(Tensor<S>, Tensor<S>),
    Max(Tensor<S>, Tensor<S>),
    Neg(Tensor<S>),
    Relu(Tensor<S>),
    Sigmoid(Tensor<S>),
    Silu(Tensor<S>),
    Exp(Tensor<S>),
    Ln(Tensor<S>),
    Sqrt(Tensor<S>),
    Atan(Tensor<S>),
    Clamp(Tensor<S>, S, S),
    Scale(Tensor<S>, S),
    AddScalar(Tensor<S>, S),
    Reshape(Tensor<S>),
    Permute(Tensor<S>, Vec<usize>),
    Narrow(Tensor<S>, usize, usize),
    Cat(Vec<Tensor<S>>, usize),
    IndexSelect(Tensor<S>, usize, Arc<Vec<usize>>),
    UpsampleNearest2(Tensor<S>),
    Sum(Tensor<S>),
    SumAxis(Tensor<S>, usize),
    MaxAxis {
        x: Tensor<S>,
        argmax: Vec<usize>,
    },
    Softmax(Tensor<S>, usize),
    MatMul(Tensor<S>, Tensor<S>),
    Linear {
        x: Tensor<S>,
        w: Tensor<S>,
        b: Option<Tensor<S>>,
    },
    Conv2d {
        x: Tensor<S>,
        w: Tensor<S>,
        b: Option<Tensor<S>>,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    },
    MaxPool2d {
        x: Tensor<S>,
        argmax: Vec<usize>,
    },
}

pub(crate) struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<S>>,
    grad: RwLock<Option<Vec<S>>>,
    requires_grad: bool,
    op: Op<S>,
    /// Set once `backward` has consumed this tensor as a root; a second
    /// backward through the same tape is rejected rather than silently
    /// double-accumulating.
    backward_done: AtomicBool,
}

/// A dense row-major tensor. Cheap to clone (shared storage).
pub struct Tensor<S: Scalar> {
    pub(crate) inner: Arc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn make(data: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Op<S>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad,
                op,
                backward_done: AtomicBool::new(false),
            }),
        }
    }

    /// Leaf tensor from raw data; `shape` must account for every element.
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "from_vec",
                format!("{} elements do not fill shape {:?}", data.len(), shape),
            ));
        }
        Ok(Self::make(data, shape.to_vec(), false, Op::None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::make(vec![S::zero(); numel], shape.to_vec(), false, Op::None)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Self::make(vec![v; numel], shape.to_vec(), false, Op::None)
    }

    pub fn scalar(v: S) -> Self {
        Self::make(vec![v], vec![1], false, Op::None)
    }

    /// `[0, 1, ..., n-1]` as a 1-D tensor; the bin-expectation decode uses it.
    pub fn arange(n: usize) -> Self {
        let data = (0..n).map(|i| S::from_f64(i as f64)).collect();
        Self::make(data, vec![n], false, Op::None)
    }

    /// Marks a leaf as trainable, returning a fresh leaf with its own
    /// identity. Only meaningful on leaves; op outputs already carry their
    /// recorded status.
    pub fn requires_grad(self, yes: bool) -> Self {
        assert!(
            matches!(self.inner.op, Op::None),
            "requires_grad flag belongs to leaf tensors"
        );
        let shape = self.inner.shape.clone();
        Self::make(self.to_vec(), shape, yes, Op::None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.op, Op::None)
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copies the elements out. Row-major order.
    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.read().expect("tensor lock").clone()
    }

    /// Reads the storage without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.inner.data.read().expect("tensor lock"))
    }

    /// In-place update of a leaf's storage (optimizer steps, running stats).
    /// Calling this on an op output would invalidate the recorded tape, so it
    /// is restricted to leaves.
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [S]) -> R) -> R {
        assert!(self.is_leaf(), "in-place writes are for leaf tensors only");
        f(&mut self.inner.data.write().expect("tensor lock"))
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected 1 element, shape is {:?}", self.shape()),
            ));
        }
        Ok(self.with_data(|d| d[0]))
    }

    /// Accumulated gradient, if backward has reached this leaf.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.read().expect("tensor lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.write().expect("tensor lock") = None;
    }

    /// A leaf copy sharing no tape history (constant from the graph's view).
    pub fn detach(&self) -> Tensor<S> {
        Self::make(self.to_vec(), self.inner.shape.clone(), false, Op::None)
    }

    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        let mut slot = self.inner.grad.write().expect("tensor lock");
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn op(&self) -> &Op<S> {
        &self.inner.op
    }

    pub(crate) fn mark_backward_done(&self) -> bool {
        self.inner.backward_done.swap(true, Ordering::SeqCst)
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<S> = self.with_data(|d| d.iter().copied().take(8).collect());
        write!(
            f,
            "Tensor{:?} {} {:?}{}",
            self.shape(),
            S::DTYPE.name(),
            preview,
            if self.numel() > 8 { " ..." } else { "" }
        )
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
