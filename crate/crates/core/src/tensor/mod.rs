//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap, shareable handle. Tensors produced by an
//! operation while gradient recording is enabled carry a [`TapeNode`] that
//! holds their inputs and a backward rule. Every tensor gets a creation id
//! from a global counter, so sorting reachable nodes by id recovers forward
//! execution order and [`Tensor::backward`] walks that order in reverse.
//!
//! Gradients accumulate across backward calls until [`Tensor::zero_grad`].

mod conv;
mod nn;
mod ops;

pub use conv::conv2d;
pub use nn::{
    avg_pool2d, batchnorm2d, cross_entropy, gather_rows, global_avg_pool, linear, max_pool2d,
    nearest_upsample, scatter_rows, softmax, BatchNormStats, NormMode,
};
pub use ops::{add, concat, mul, straight_through, sub};

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
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

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

/// Scalar types a tensor can hold.
pub trait Element:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    /// `c = a * b + beta * c` for row-major `a: [m, k]`, `b: [k, n]`.
    /// `trans_a` / `trans_b` mean the operand is stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        beta: Self,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Logical [rows, cols]; stored either row-major as-is or as [cols, rows].
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                // SAFETY: bounds asserted above; strides describe dense buffers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm);
impl_element!(f64, DType::F64, matrixmultiply::dgemm);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
    static BRANCH_TRACE: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Disables tape recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Counts multiply-adds executed by conv and linear ops on this thread
/// while alive. Nested counters are not supported.
pub struct MacCounter {
    _private: (),
}

impl MacCounter {
    pub fn start() -> Self {
        MAC_COUNTER.with(|c| c.set(Some(0)));
        MacCounter { _private: () }
    }

    pub fn count(&self) -> u64 {
        MAC_COUNTER.with(|c| c.get().unwrap_or(0))
    }
}

impl Drop for MacCounter {
    fn drop(&mut self) {
        MAC_COUNTER.with(|c| c.set(None));
    }
}

/// Hashes the branch taken by every element of every piecewise op
/// (`relu`, `clamp_min`, `max_pool2d`) on this thread while alive. Two
/// evaluations with equal patterns lie on the same smooth piece.
pub struct BranchTrace {
    _private: (),
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl BranchTrace {
    pub fn start() -> Self {
        BRANCH_TRACE.with(|c| c.set(Some(FNV_OFFSET)));
        BranchTrace { _private: () }
    }

    pub fn pattern(&self) -> u64 {
        BRANCH_TRACE.with(|c| c.get().unwrap_or(FNV_OFFSET))
    }
}

impl Drop for BranchTrace {
    fn drop(&mut self) {
        BRANCH_TRACE.with(|c| c.set(None));
    }
}

pub(crate) fn tracing_branches() -> bool {
    BRANCH_TRACE.with(|c| c.get().is_some())
}

pub(crate) fn record_branches(branches: impl Iterator<Item = u64>) {
    BRANCH_TRACE.with(|c| {
        if let Some(mut h) = c.get() {
            for b in branches {
                h = (h ^ b).wrapping_mul(0x0100_0000_01b3);
            }
            c.set(Some(h));
        }
    });
}

pub(crate) fn record_macs(n: u64) {
    MAC_COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

/// Backward rule: maps the output gradient to one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

/// One recorded operation on the tape.
pub struct TapeNode<T: Element> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<TapeNode<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Element = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("op", &self.op_name())
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<TapeNode<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad,
                node,
            }),
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", "shape", format!("extents must be positive, got {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                "data",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Like [`Tensor::from_vec`] but allows zero extents (empty selections).
    pub(crate) fn raw(data: Vec<T>, shape: Vec<usize>) -> Self {
        Self::build(data, shape, false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::from_f64_lossy(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(vec![T::zero(); numel(shape)], shape.to_vec())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::raw(vec![value; numel(shape)], shape.to_vec())
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![value], vec![1])
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.into_param())
    }

    fn into_param(self) -> Self {
        let data = self.to_vec();
        Self::build(data, self.inner.shape.clone(), true, None)
    }

    /// Records an op output. The node is dropped when recording is off or
    /// no input needs a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| TapeNode { op, inputs, backward });
        Self::build(data, shape, requires_grad, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op)
    }

    /// Inputs of the op that produced this tensor (empty for leaves).
    pub fn op_inputs(&self) -> &[Tensor<T>] {
        self.inner.node.as_ref().map(|n| n.inputs.as_slice()).unwrap_or(&[])
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.inner.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    pub fn item(&self) -> T {
        self.data()[0]
    }

    /// Overwrites values in place (optimizer updates, checkpoint loads).
    pub fn set_data(&self, values: &[T]) -> Result<()> {
        let mut d = self.inner.data.write().expect("tensor data lock poisoned");
        if d.len() != values.len() {
            return Err(Error::dim("set_data", "data", format!("expected {} values, got {}", d.len(), values.len())));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        let mut d = self.inner.data.write().expect("tensor data lock poisoned");
        f(&mut d);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Copy without tape history.
    pub fn detach(&self) -> Self {
        Self::raw(self.to_vec(), self.shape().to_vec())
    }

    /// Reverse pass from a scalar loss. Every reachable tensor that
    /// requires grad receives (accumulates) its gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 || !self.requires_grad() {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let mut order: BTreeMap<u64, Tensor<T>> = BTreeMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if order.contains_key(&t.id()) {
                continue;
            }
            for input in t.op_inputs() {
                if input.requires_grad() && !order.contains_key(&input.id()) {
                    stack.push(input.clone());
                }
            }
            order.insert(t.id(), t);
        }

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for (id, t) in order.iter().rev() {
            let Some(g) = pending.remove(id) else { continue };
            t.accumulate_grad(&g);
            let Some(node) = &t.inner.node else { continue };
            let grads = (node.backward)(&g);
            debug_assert_eq!(grads.len(), node.inputs.len(), "backward arity for {}", node.op);
            for (input, ig) in node.inputs.iter().zip(grads) {
                let Some(ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(ig.len(), input.numel(), "gradient size for input of {}", node.op);
                match pending.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        pending.insert(input.id(), ig);
                    }
                }
            }
        }
        Ok(())
    }
}
