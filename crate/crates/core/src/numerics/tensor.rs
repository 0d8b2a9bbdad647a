//! Dense row-major tensors.
//!
//! A `Tensor` is a cheap-to-clone handle: the payload is an `Arc<Vec<f64>>`
//! and clones share both the buffer and the tensor's identity. Identity is
//! what makes weight tying work — the tape accumulates gradients per tensor
//! id, so two uses of the same parameter produce one summed gradient.
//!
//! Tensors are immutable after construction. The one sanctioned exception is
//! the optimizer, which updates parameters in place through
//! [`Tensor::data_mut`]; that call only succeeds cheaply when the owner holds
//! the sole reference, which is exactly the single-writer discipline the
//! trainer follows.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Dtype;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: Dtype,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    id: u64,
}

impl Tensor {
    /// Build a tensor from a buffer. The buffer is rounded to `dtype`.
    pub fn from_vec(shape: Vec<usize>, dtype: Dtype, mut data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        dtype.round_slice(&mut data);
        Ok(Tensor { shape, dtype, data: Arc::new(data), requires_grad: false, id: fresh_id() })
    }

    /// Internal constructor for op outputs: trusts that `data` is already
    /// rounded and consistent with `shape`.
    pub(crate) fn from_raw(shape: Vec<usize>, dtype: Dtype, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, dtype, data: Arc::new(data), requires_grad: false, id: fresh_id() }
    }

    pub fn zeros(shape: Vec<usize>, dtype: Dtype) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_raw(shape, dtype, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, dtype: Dtype, value: f64) -> Tensor {
        let numel = shape.iter().product();
        let mut data = vec![value; numel];
        dtype.round_slice(&mut data);
        Tensor { shape, dtype, data: Arc::new(data), requires_grad: false, id: fresh_id() }
    }

    pub fn scalar(value: f64, dtype: Dtype) -> Tensor {
        Tensor::full(vec![1], dtype, value)
    }

    /// Mark this tensor as a trainable leaf.
    pub fn requires_grad(mut self, flag: bool) -> Tensor {
        self.requires_grad = flag;
        self
    }

    pub fn is_param(&self) -> bool {
        self.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shared handle to the payload, used by backward closures so saved
    /// inputs cost one refcount bump instead of a copy.
    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// In-place mutable access for optimizer updates. Clones the buffer if
    /// any other handle is still alive, so readers never observe a torn
    /// write; with the single-writer discipline the clone never triggers.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    /// Same data, new shape. Zero-copy; the result is a fresh tensor
    /// identity (use [`crate::numerics::Tape::reshape`] inside traced code).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            dtype: self.dtype,
            data: Arc::clone(&self.data),
            requires_grad: false,
            id: fresh_id(),
        })
    }

    /// A detached copy: same buffer, fresh identity, no grad. Used to hand
    /// recurrent states across steps without growing the autodiff graph.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data: Arc::clone(&self.data),
            requires_grad: false,
            id: fresh_id(),
        }
    }

    /// Deep copy with fresh identity (used to build untied reference models).
    pub fn deep_copy(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data: Arc::new(self.data.as_ref().clone()),
            requires_grad: self.requires_grad,
            id: fresh_id(),
        }
    }

    /// Re-store the same values at a different dtype.
    pub fn to_dtype(&self, dtype: Dtype) -> Tensor {
        let mut data = self.data.as_ref().clone();
        dtype.round_slice(&mut data);
        Tensor {
            shape: self.shape.clone(),
            dtype,
            data: Arc::new(data),
            requires_grad: self.requires_grad,
            id: fresh_id(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Logical storage size: numel × dtype width. This is what the value
    /// occupies when serialized at its declared dtype.
    pub fn logical_bytes(&self) -> usize {
        self.numel() * self.dtype.width()
    }
}
