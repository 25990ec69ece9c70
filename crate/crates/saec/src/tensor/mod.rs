//! Tensor core: a dense, row-major, reference-counted tensor plus a tape
//! for reverse-mode differentiation.
//!
//! Tensors are immutable once created except for their gradient buffer (and
//! in-place parameter updates performed by optimizers between tape
//! lifetimes). Every operation allocates a fresh output; there is no view
//! aliasing, so no op can observe another's scratch state.

pub mod gradcheck;
pub mod kernels;
pub mod shape;
pub mod tape;


use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;

/// Errors surfaced by tensor construction and ops.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape {shape:?} ({want} elements)")]
    DataLength {
        shape: Vec<usize>,
        want: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {want}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        want: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value at flat index {index} (= {value})")]
    NonFinite { index: usize, value: f64 },
    #[error("backward seed must be a scalar that requires grad")]
    InvalidBackwardSeed,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
}

/// Dense row-major tensor. Cloning is cheap (shared storage); all ops copy
/// their inputs' values into fresh outputs, never aliasing.
pub struct Tensor<S: Scalar>(Rc<Inner<S>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    /// Leaf tensor with explicit grad requirement.
    pub fn new(shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<Self, TensorError> {
        let want = shape::numel(shape);
        if data.len() != want {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                want,
                got: data.len(),
            });
        }
        Ok(Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape: shape.to_vec(),
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
        })))
    }

    /// Constant leaf (no gradient).
    pub fn constant(shape: &[usize], data: Vec<S>) -> Result<Self, TensorError> {
        Self::new(shape, data, false)
    }

    /// Trainable leaf (gradient accumulated by backward passes).
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self, TensorError> {
        Self::new(shape, data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor::new(shape, vec![v; shape::numel(shape)], false).expect("consistent by construction")
    }

    /// Rank-0 constant.
    pub fn scalar(v: S) -> Self {
        Tensor::new(&[], vec![v], false).expect("scalar")
    }

    /// Rank-0 trainable leaf.
    pub fn scalar_param(v: S) -> Self {
        Tensor::new(&[], vec![v], true).expect("scalar")
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
        shape::numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Borrow the value buffer (row-major).
    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.0.data.borrow()
    }

    /// Mutable borrow of the value buffer. Reserved for optimizer-style
    /// in-place updates between tape lifetimes; ops never mutate inputs.
    pub fn data_mut(&self) -> RefMut<'_, Vec<S>> {
        self.0.data.borrow_mut()
    }

    /// Copy of the value buffer.
    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.borrow().clone()
    }

    /// The single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> S {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    /// Element at a multi-index (for tests and small reads).
    pub fn at(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let st = shape::strides(&self.0.shape);
        let mut off = 0;
        for (d, (&i, &s)) in index.iter().zip(&st).enumerate() {
            assert!(i < self.0.shape[d], "index out of bounds in dim {d}");
            off += i * s;
        }
        self.0.data.borrow()[off]
    }

    /// Copy of the gradient buffer, if any has been accumulated.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    /// Drop any accumulated gradient.
    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Add `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, &d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Fresh leaf with the same values and shape, detached from any history,
    /// not requiring grad.
    pub fn detached(&self) -> Tensor<S> {
        Tensor::new(&self.0.shape, self.to_vec(), false).expect("same shape")
    }

    /// Fresh leaf with the same values, shape, and grad requirement
    /// (gradient buffer not copied).
    pub fn deep_clone(&self) -> Tensor<S> {
        Tensor::new(&self.0.shape, self.to_vec(), self.0.requires_grad).expect("same shape")
    }

    /// Error if any element is NaN or infinite.
    pub fn validate_finite(&self) -> Result<(), TensorError> {
        for (i, v) in self.0.data.borrow().iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    index: i,
                    value: v.to_f64_c(),
                });
            }
        }
        Ok(())
    }

    /// Stack equally-shaped tensors along a new leading axis: `n` items of
    /// shape `[d0, d1, ...]` become one constant of shape `[n, d0, d1, ...]`.
    pub fn stack(items: &[&Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        let first = items.first().ok_or(TensorError::Invalid {
            op: "stack",
            msg: "no tensors given".into(),
        })?;
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for item in items {
            if item.shape() != first.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape().to_vec(),
                    rhs: item.shape().to_vec(),
                });
            }
            data.extend_from_slice(&item.data());
        }
        Tensor::new(&shape, data, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6], false).is_ok());
        let err = Tensor::<f64>::new(&[2, 3], vec![0.0; 5], false).unwrap_err();
        assert!(matches!(
            err,
            TensorError::DataLength {
                want: 6,
                got: 5,
                ..
            }
        ));
    }

    #[test]
    fn rank0_scalar_holds_one_element() {
        let t = Tensor::scalar(3.5f64);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 3.5);
    }

    #[test]
    fn ids_are_unique() {
        let a = Tensor::<f64>::zeros(&[2]);
        let b = Tensor::<f64>::zeros(&[2]);
        let c = a.clone();
        assert_ne!(a.id(), b.id());
        assert_eq!(a.id(), c.id()); // clone shares identity
    }

    #[test]
    fn grad_accumulates_additively() {
        let t = Tensor::param(&[3], vec![0.0f64; 3]).unwrap();
        assert!(!t.has_grad());
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[10.0, 10.0, 10.0]);
        assert_eq!(t.grad().unwrap(), vec![11.0, 12.0, 13.0]);
        t.zero_grad();
        assert!(!t.has_grad());
    }

    #[test]
    fn detached_copies_values_and_drops_grad_flag() {
        let t = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let d = t.detached();
        assert_eq!(d.to_vec(), vec![1.0, 2.0]);
        assert!(!d.requires_grad());
        assert_ne!(d.id(), t.id());
        // storage is independent
        d.data_mut()[0] = 9.0;
        assert_eq!(t.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::constant(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn validate_finite_flags_nan() {
        let t = Tensor::constant(&[2], vec![1.0f64, f64::NAN]).unwrap();
        let err = t.validate_finite().unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }));
        let ok = Tensor::constant(&[2], vec![1.0f64, 2.0]).unwrap();
        assert!(ok.validate_finite().is_ok());
    }

    #[test]
    fn stack_prepends_batch_axis() {
        let a = Tensor::constant(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::constant(&[2, 2], vec![5.0f64, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn stack_rejects_mixed_shapes_and_empty_input() {
        let a = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            Tensor::stack(&[&a, &b]),
            Err(TensorError::ShapeMismatch { op: "stack", .. })
        ));
        assert!(Tensor::<f64>::stack(&[]).is_err());
    }
}
