//! Dense f32 tensors with a reverse-mode autodiff tape and an AdamW optimizer.
//!
//! The design is deliberately small: row-major storage, the ops the denoiser
//! needs and nothing more, an explicit [`Tape`] that records execution order,
//! and caller-owned gradient reset. Data buffers are immutable after
//! construction (the optimizer swaps in fresh buffers); gradient buffers are
//! the one mutable slot and are shared across clones of the same tensor.

pub mod io;
pub(crate) mod kernels;
mod optim;
mod tape;


pub use optim::OptimizerState;
pub use tape::Tape;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub type TensorId = u64;

/// Dense row-major f32 array. Clones share storage and the gradient slot.
#[derive(Clone)]
pub struct Tensor {
    id: TensorId,
    shape: Arc<Vec<usize>>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    grad: Arc<Mutex<Option<Vec<f32>>>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dims must be positive, got {shape:?}"
            )));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: Arc::new(shape),
            data: Arc::new(data),
            requires_grad: false,
            grad: Arc::new(Mutex::new(None)),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self::from_vec(shape, vec![0.0; n]).expect("zeros: consistent by construction")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self::from_vec(shape, vec![value; n]).expect("full: consistent by construction")
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_vec(Vec::new(), vec![value]).expect("scalar")
    }

    /// Standard-normal samples drawn in a fixed element order.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        let data = (0..n).map(|_| normal_sample(rng)).collect();
        Self::from_vec(shape, data).expect("randn")
    }

    pub fn rand_uniform(shape: impl Into<Vec<usize>>, lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_vec(shape, data).expect("rand_uniform")
    }

    /// Marks this tensor as a trainable leaf.
    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub(crate) fn result_of(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Self {
        let mut t = Self::from_vec(shape, data).expect("op result: consistent by construction");
        t.requires_grad = requires_grad;
        t
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The scalar value; panics if the tensor is not single-element.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Clones the current gradient buffer out, if populated.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.grad.lock().unwrap().clone()
    }

    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[f32]>) -> R) -> R {
        let g = self.grad.lock().unwrap();
        f(g.as_deref())
    }

    /// Resets the gradient to zeros. Reset is caller-owned: `backward`
    /// accumulates into whatever is present.
    pub fn zero_grad(&self) {
        *self.grad.lock().unwrap() = Some(vec![0.0; self.numel()]);
    }

    /// Drops the gradient buffer entirely.
    pub fn clear_grad(&self) {
        *self.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut g = self.grad.lock().unwrap();
        match g.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Replaces the data buffer (optimizer updates). Id, shape and the
    /// gradient slot are preserved; clones made before the call keep the old
    /// buffer.
    pub(crate) fn replace_data(&mut self, data: Vec<f32>) {
        assert_eq!(data.len(), self.numel(), "replace_data: length change");
        self.data = Arc::new(data);
    }

    /// Same data viewed under a new shape with the same element count.
    pub(crate) fn reshaped_view(&self, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel_of(&shape), self.numel());
        Tensor {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: Arc::new(shape),
            data: Arc::clone(&self.data),
            requires_grad,
            grad: Arc::new(Mutex::new(None)),
        }
    }
}

/// Box-Muller; two uniforms per sample keeps the stream layout obvious.
fn normal_sample(rng: &mut impl Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Suffix broadcast check: `b` repeats across the leading dims of `a`.
pub(crate) fn broadcast_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() < a.len() && a[a.len() - b.len()..] == *b
}

pub(crate) fn shape_mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
        let t = Tensor::from_vec(vec![2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn grad_accumulates_and_resets() {
        let t = Tensor::zeros(vec![3]).with_requires_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 3.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), vec![0.0; 3]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn clones_share_grad_slot() {
        let t = Tensor::zeros(vec![2]).with_requires_grad();
        let c = t.clone();
        c.accumulate_grad(&[5.0, 5.0]);
        assert_eq!(t.grad().unwrap(), vec![5.0, 5.0]);
    }
}
