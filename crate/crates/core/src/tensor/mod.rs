//! Tape-based reverse-mode automatic differentiation over dense row-major
//! tensors.
//!
//! A [`Tape`] records every forward op as a node holding its output values and
//! enough information to run the backward rule. Handles ([`Var`]) index into
//! the tape; nodes only ever reference earlier nodes, so a reverse sweep over
//! the node list is a valid topological order.
//!
//! Parameters live outside the tape in a [`ParamStore`]; [`Tape::param`]
//! copies a parameter onto the tape and [`Tape::accumulate_param_grads`]
//! writes gradients back after [`Tape::backward`].

mod adam;
mod gradcheck;
mod ops;
mod params;

use std::fmt::{self, Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{gradient_check, GradCheckReport, Graph};
pub use params::{ParamId, ParamStore, Parameter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op} over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a backward pass")]
    Consumed,

    #[error("tensor handle {0} does not belong to this tape")]
    UnknownVar(usize),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("index {index} out of range for {op} with extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Floating-point element type of the engine (f32 for training, f64 for
/// gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `C ← α·A·B + β·C` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn c(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable constant")
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            #[inline]
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Extents are checked by the callers in `ops`: every index the
                // strides can reach lies inside the slices.
                debug_assert!(c.len() >= m * n);
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("exact width"))
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

/// `C (m×n) ← A·B + β·C` for row-major operands, either of which may be
/// stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    beta: T,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_strided(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A node on the tape: output values, a lazily allocated gradient, and the
/// record of the op that produced it.
pub struct TapeTensor<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: ops::Op<T>,
    needs_grad: bool,
}

impl<T: Real> TapeTensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[T] {
        &self.value
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.op, ops::Op::Leaf | ops::Op::Param(_))
    }
}

impl<T: Real> Debug for TapeTensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TapeTensor")
            .field("shape", &self.shape)
            .field("op", &self.op.name())
            .finish()
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<TapeTensor<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node; handles from before the clear become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn node(&self, v: Var) -> TensorResult<&TapeTensor<T>> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_deref())
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> TensorResult<Var> {
        self.leaf(shape, value, false)
    }

    /// A differentiable input.
    pub fn variable(&mut self, shape: &[usize], value: Vec<T>) -> TensorResult<Var> {
        self.leaf(shape, value, true)
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<T>, needs_grad: bool) -> TensorResult<Var> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(TensorError::Shape {
                op: "leaf",
                detail: format!("shape {shape:?} needs {n} values, got {}", value.len()),
            });
        }
        Ok(self.push(shape.to_vec(), value, ops::Op::Leaf, needs_grad))
    }

    /// Copies parameter `id` onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.shape.clone(), p.value.clone(), ops::Op::Param(id), p.trainable)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: ops::Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(TapeTensor {
            shape,
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates gradients from the scalar `loss` to every reachable node.
    /// A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.consumed {
            return Err(TensorError::Consumed);
        }
        let shape = self.node(loss)?.shape.clone();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = node.grad.take() else {
                continue;
            };
            ops::backward(node, &grad, before);
            node.grad = Some(grad);
        }
        Ok(())
    }

    /// Gradients of the parameter nodes, in tape order. A parameter used
    /// twice appears twice.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes.iter().filter_map(|node| match (&node.op, &node.grad) {
            (ops::Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    /// Adds the gradients of every parameter node into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads() {
            let p = store.get_mut(id);
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += *b;
            }
        }
    }
}

#[cfg(test)]
mod tests;
