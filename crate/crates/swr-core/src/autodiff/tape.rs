//! Reverse-mode tape.
//!
//! Operations append to the tape in execution order; [`Tape::backward`]
//! replays them in exact reverse order, accumulating vector-Jacobian
//! products in an adjoint table, and finally writes each trainable leaf's
//! total adjoint into its gradient slot exactly once. A tape is
//! single-threaded; independent tapes may run on separate threads.

use std::collections::{HashMap, HashSet};

use crate::error::{Result, SwrError};

use super::ops::TapeOp;
use super::tensor::Tensor;

pub struct Tape {
    enabled: bool,
    ops: Vec<TapeOp>,
    produced: HashSet<u64>,
}

impl Tape {
    /// A recording tape for training passes.
    pub fn new() -> Tape {
        Tape { enabled: true, ops: Vec::new(), produced: HashSet::new() }
    }

    /// A non-recording tape for pure evaluation passes.
    pub fn inference() -> Tape {
        Tape { enabled: false, ops: Vec::new(), produced: HashSet::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    /// Record iff recording is on and the result can influence a gradient:
    /// some input is either a trainable leaf or an earlier tape product.
    pub(crate) fn should_record(&self, inputs: &[&Tensor]) -> bool {
        self.enabled
            && inputs
                .iter()
                .any(|t| t.requires_grad() || self.produced.contains(&t.id()))
    }

    pub(crate) fn push(&mut self, op: TapeOp) {
        self.produced.insert(op.output_id());
        self.ops.push(op);
    }

    /// Run the reverse sweep from a scalar loss. On success the tape is
    /// cleared and every reachable trainable leaf holds its gradient.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(SwrError::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        if !self.produced.contains(&loss.id()) {
            return Err(SwrError::LossNotOnTape);
        }
        let ops = std::mem::take(&mut self.ops);
        let produced = std::mem::take(&mut self.produced);
        let mut adj = Adjoints::new(produced);
        adj.map.insert(loss.id(), vec![1.0]);
        for op in ops.iter().rev() {
            op.backward(&mut adj);
        }
        let mut written = HashSet::new();
        for leaf in adj.leaves.drain(..) {
            if written.insert(leaf.id()) {
                if let Some(grad) = adj.map.remove(&leaf.id()) {
                    leaf.set_grad(grad);
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Adjoint accumulator used during the reverse sweep.
pub(crate) struct Adjoints {
    produced: HashSet<u64>,
    map: HashMap<u64, Vec<f32>>,
    leaves: Vec<Tensor>,
}

impl Adjoints {
    fn new(produced: HashSet<u64>) -> Adjoints {
        Adjoints { produced, map: HashMap::new(), leaves: Vec::new() }
    }

    /// Whether an adjoint for this tensor is of any use: either it is a
    /// trainable leaf or gradient still has to flow through it.
    pub(crate) fn wants(&self, t: &Tensor) -> bool {
        t.requires_grad() || self.produced.contains(&t.id())
    }

    /// Remove and return the adjoint of an op output. In reverse order the
    /// producing op is the last reader, so the entry can be dropped.
    pub(crate) fn take(&mut self, out: &Tensor) -> Option<Vec<f32>> {
        self.map.remove(&out.id())
    }

    pub(crate) fn accumulate(&mut self, t: &Tensor, delta: Vec<f32>) {
        debug_assert_eq!(delta.len(), t.numel());
        if t.requires_grad() {
            self.leaves.push(t.clone());
        }
        match self.map.entry(t.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (acc, v) in e.get_mut().iter_mut().zip(delta) {
                    *acc += v;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(delta);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::ops;
    use super::*;

    #[test]
    fn square_sum_gradient() {
        // loss = sum(w . w), w = [1, 2] -> grad = 2w = [2, 4]
        let mut tape = Tape::new();
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let sq = ops::mul(&mut tape, &w, &w).unwrap();
        let loss = ops::sum(&mut tape, &sq).unwrap();
        assert_eq!(loss.item(), 5.0);
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_gradient_matches_softmax_minus_onehot() {
        // logits [0, 0], label 0 -> grad = softmax - onehot = [-0.5, 0.5]
        let mut tape = Tape::new();
        let logits = Tensor::param(vec![0.0, 0.0], &[1, 2]).unwrap();
        let loss = ops::cross_entropy_logits(&mut tape, &logits, &[0], 0.0).unwrap();
        tape.backward(&loss).unwrap();
        let g = logits.grad().unwrap();
        assert!((g[0] + 0.5).abs() < 1e-6, "{g:?}");
        assert!((g[1] - 0.5).abs() < 1e-6, "{g:?}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = ops::mul(&mut tape, &w, &w).unwrap();
        let err = tape.backward(&y).unwrap_err();
        assert!(matches!(err, SwrError::NonScalarLoss { .. }));
    }

    #[test]
    fn loss_not_on_tape_rejected() {
        let mut tape = Tape::new();
        let loose = Tensor::scalar(3.0);
        assert!(matches!(tape.backward(&loose).unwrap_err(), SwrError::LossNotOnTape));
    }

    #[test]
    fn backward_clears_tape() {
        let mut tape = Tape::new();
        let w = Tensor::param(vec![2.0], &[1]).unwrap();
        let y = ops::mul(&mut tape, &w, &w).unwrap();
        assert_eq!(tape.op_count(), 1);
        tape.backward(&y).unwrap();
        assert_eq!(tape.op_count(), 0);
        // The same loss is no longer on the tape.
        assert!(matches!(tape.backward(&y).unwrap_err(), SwrError::LossNotOnTape));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let w = Tensor::param(vec![1.0, -1.0], &[2]).unwrap();
        let y = ops::relu(&mut tape, &w).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
        assert_eq!(tape.op_count(), 0);
    }

    #[test]
    fn grads_skip_frozen_leaves() {
        let mut tape = Tape::new();
        let w = Tensor::param(vec![3.0], &[1]).unwrap();
        let frozen = w.detached();
        let prod = ops::mul(&mut tape, &w, &frozen).unwrap();
        tape.backward(&prod).unwrap();
        assert_eq!(w.grad().unwrap(), vec![3.0]);
        assert!(frozen.grad().is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = w*w + w -> dy/dw = 2w + 1
        let mut tape = Tape::new();
        let w = Tensor::param(vec![4.0], &[1]).unwrap();
        let sq = ops::mul(&mut tape, &w, &w).unwrap();
        let y = ops::add(&mut tape, &sq, &w).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(w.grad().unwrap(), vec![9.0]);
    }

    #[test]
    fn second_backward_needs_fresh_forward() {
        let mut tape = Tape::new();
        let w = Tensor::param(vec![1.0], &[1]).unwrap();
        let y1 = ops::mul(&mut tape, &w, &w).unwrap();
        tape.backward(&y1).unwrap();
        let y2 = ops::scalar_mul(&mut tape, &w, 3.0).unwrap();
        tape.backward(&y2).unwrap();
        // Second backward overwrites the slot: grad is d(3w)/dw = 3.
        assert_eq!(w.grad().unwrap(), vec![3.0]);
    }
}
