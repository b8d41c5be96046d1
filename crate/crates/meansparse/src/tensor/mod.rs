//! Dense tensors with deterministic reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major `f64` buffer plus a shape. When any
//! input of an operation requires gradients, the result records the operation
//! on a tape (an acyclic graph of [`Op`] nodes with strictly increasing ids).
//! [`Tensor::backward`] walks that tape once, in reverse id order, so gradient
//! accumulation is deterministic regardless of how many threads run
//! *independent* tapes elsewhere.

mod backward;
mod ops;
mod serial;

pub(crate) use ops::Op;
pub use serial::{read_mstn, write_mstn, DType};

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Dense N-dimensional array, cheaply clonable (shared buffer).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Leaf tensor without gradient tracking.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "new" });
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn with_grad(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Tensor::from_parts(
            t.inner.data.clone(),
            t.inner.shape.clone(),
            true,
            None,
        ))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_parts(vec![v], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(vec![0.0; n], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(vec![1.0; n], shape.to_vec(), false, None)
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        // Without grad-tracking inputs the tape node is dead weight; drop it.
        let op = if requires_grad { Some(op) } else { None };
        Tensor::from_parts(data, shape, requires_grad, op)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Gradient buffer populated by the last `backward` pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Copy of the value as a fresh leaf, cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    /// Detached copy that requires gradients (e.g. an attack iterate).
    pub fn detach_with_grad(&self) -> Tensor {
        Tensor::from_parts(self.inner.data.clone(), self.inner.shape.clone(), true, None)
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.inner.op.as_ref()
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}
