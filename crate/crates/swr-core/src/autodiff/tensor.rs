//! Dense f32 tensors.
//!
//! A [`Tensor`] is an immutable row-major value. Cloning a tensor clones a
//! handle; the payload is shared. The only mutation ever applied to a live
//! tensor is the gradient slot, written by [`crate::autodiff::tape::Tape::backward`].
//! Parameter updates never mutate in place: optimizers build a replacement
//! tensor, so anything recorded on a tape stays valid.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Result, SwrError};
use crate::rng::SwrRng;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
struct GradSlot {
    requires_grad: bool,
    grad: Mutex<Option<Vec<f32>>>,
}

#[derive(Clone, Debug)]
pub struct Tensor {
    id: u64,
    shape: Arc<Vec<usize>>,
    data: Arc<Vec<f32>>,
    slot: Arc<GradSlot>,
}

impl Tensor {
    fn build(data: Vec<f32>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SwrError::shape(
                "tensor",
                format!("shape {:?} implies {} elements, data has {}", shape, numel, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(SwrError::shape("tensor", format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: Arc::new(shape.to_vec()),
            data: Arc::new(data),
            slot: Arc::new(GradSlot { requires_grad, grad: Mutex::new(None) }),
        })
    }

    /// Plain value; does not participate in gradient computation as a leaf.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        Tensor::build(data, shape, false)
    }

    /// Trainable leaf: backward will populate its gradient slot.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        Tensor::build(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::build(vec![0.0; numel], shape, false).expect("zeros")
    }

    pub fn zeros_param(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::build(vec![0.0; numel], shape, true).expect("zeros_param")
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel = shape.iter().product();
        Tensor::build(vec![value; numel], shape, false).expect("full")
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::build(vec![value], &[1], false).expect("scalar")
    }

    /// Uniform init in [-bound, bound], as a trainable parameter.
    pub fn uniform_param(shape: &[usize], bound: f32, rng: &mut SwrRng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor::build(data, shape, true).expect("uniform_param")
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.slot.requires_grad
    }

    /// Value of the scalar tensor. Panics if not scalar.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Gradient captured by the most recent backward pass this tensor
    /// participated in, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.slot.grad.lock().unwrap().clone()
    }

    pub(crate) fn set_grad(&self, grad: Vec<f32>) {
        debug_assert_eq!(grad.len(), self.numel());
        *self.slot.grad.lock().unwrap() = Some(grad);
    }

    /// New handle sharing this tensor's payload, detached from gradient
    /// tracking. Used to freeze parameters for a training stage.
    pub fn detached(&self) -> Tensor {
        Tensor {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: Arc::clone(&self.shape),
            data: Arc::clone(&self.data),
            slot: Arc::new(GradSlot { requires_grad: false, grad: Mutex::new(None) }),
        }
    }

    /// New trainable handle sharing this tensor's payload.
    pub fn as_param(&self) -> Tensor {
        Tensor {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: Arc::clone(&self.shape),
            data: Arc::clone(&self.data),
            slot: Arc::new(GradSlot { requires_grad: true, grad: Mutex::new(None) }),
        }
    }

    /// True when both handles view the same payload allocation.
    pub fn shares_data(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// Bitwise equality of payloads (shape and every f32 bit pattern).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        let err = Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).unwrap_err();
        assert!(matches!(err, SwrError::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new(vec![], &[0, 3]).is_err());
    }

    #[test]
    fn grad_slot_present_only_after_backward() {
        let t = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(t.requires_grad());
        assert!(t.grad().is_none());
        t.set_grad(vec![3.0, 4.0]);
        assert_eq!(t.grad().unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn clones_share_grad_slot_detached_does_not() {
        let t = Tensor::param(vec![1.0], &[1]).unwrap();
        let alias = t.clone();
        let frozen = t.detached();
        t.set_grad(vec![5.0]);
        assert_eq!(alias.grad().unwrap(), vec![5.0]);
        assert!(frozen.grad().is_none());
        assert!(!frozen.requires_grad());
        assert!(frozen.shares_data(&t));
        assert_ne!(frozen.id(), t.id());
        assert_eq!(alias.id(), t.id());
    }

    #[test]
    fn tensors_are_sendable() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Tensor>();
    }
}
