//! Optimizers and schedules.
//!
//! Parameters are updated by replacement: the optimizer reads the gradient
//! captured on the old handle, builds a fresh tensor with the stepped
//! values, and swaps it into the model. Nothing recorded on a tape is ever
//! mutated.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Result, SwrError};

/// Cosine interpolation from `start` (t = 0) to `end` (t = total).
/// Steps past `total` clamp to `end`.
pub fn cosine_schedule(start: f32, end: f32, step: usize, total: usize) -> f32 {
    assert!(total >= 1, "cosine_schedule: total must be >= 1");
    if step >= total {
        return end;
    }
    let progress = step as f64 / total as f64;
    let blend = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    (end as f64 + (start as f64 - end as f64) * blend) as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// A named slot in the trainable set for one optimization step.
pub struct ParamSlot<'a> {
    pub name: String,
    pub tensor: &'a mut Tensor,
}

impl<'a> ParamSlot<'a> {
    pub fn new(name: impl Into<String>, tensor: &'a mut Tensor) -> Self {
        ParamSlot { name: name.into(), tensor }
    }
}

fn grad_of(slot: &ParamSlot) -> Result<Vec<f32>> {
    let g = slot
        .tensor
        .grad()
        .unwrap_or_else(|| vec![0.0; slot.tensor.numel()]);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(SwrError::NonFiniteGradient { param: slot.name.clone() });
    }
    Ok(g)
}

fn replace(slot: &mut ParamSlot, data: Vec<f32>) {
    let shape = slot.tensor.shape().to_vec();
    *slot.tensor = Tensor::param(data, &shape).expect("param replacement");
}

/// Adam with bias correction; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new() -> Adam {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [ParamSlot], lr: f32) -> Result<()> {
        assert!(lr > 0.0, "adam: lr must be positive");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "adam: trainable set changed size");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, slot) in params.iter_mut().enumerate() {
            let g = grad_of(slot)?;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            assert_eq!(m.len(), g.len(), "adam: param {} changed shape", slot.name);
            let mut data = slot.tensor.data().to_vec();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            replace(slot, data);
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

/// Plain gradient descent step.
pub fn sgd_step(params: &mut [ParamSlot], lr: f32) -> Result<()> {
    assert!(lr > 0.0, "sgd: lr must be positive");
    for slot in params.iter_mut() {
        let g = grad_of(slot)?;
        let mut data = slot.tensor.data().to_vec();
        for i in 0..g.len() {
            data[i] -= lr * g[i];
        }
        replace(slot, data);
    }
    Ok(())
}

/// Dispatcher over the configured optimizer kind.
pub enum Optimizer {
    Adam(Adam),
    Sgd,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Optimizer {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new()),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn step(&mut self, params: &mut [ParamSlot], lr: f32) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(params, lr),
            Optimizer::Sgd => sgd_step(params, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_schedule(2.0, 0.5, 0, 100), 2.0);
        assert_eq!(cosine_schedule(2.0, 0.5, 100, 100), 0.5);
        let mid = cosine_schedule(2.0, 0.5, 50, 100);
        assert!((mid - 1.25).abs() < 1e-6, "{mid}");
        // Past the end clamps to end.
        assert_eq!(cosine_schedule(2.0, 0.5, 250, 100), 0.5);
    }

    #[test]
    fn adam_zero_grad_leaves_params_unchanged() {
        let mut w = Tensor::param(vec![1.5, -2.0], &[2]).unwrap();
        w.set_grad(vec![0.0, 0.0]);
        let mut adam = Adam::new();
        adam.step(&mut [ParamSlot::new("w", &mut w)], 0.1).unwrap();
        assert_eq!(w.data(), &[1.5, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // Hand computation for step 1, g = 1, lr = 0.1:
        //   m = 0.1, v = 0.001, mhat = 1, vhat = 1
        //   delta = lr * 1 / (1 + 1e-8) ~= 0.1
        let mut w = Tensor::param(vec![1.0], &[1]).unwrap();
        w.set_grad(vec![1.0]);
        let mut adam = Adam::new();
        adam.step(&mut [ParamSlot::new("w", &mut w)], 0.1).unwrap();
        let moved = 1.0 - w.data()[0];
        assert!((moved - 0.1).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut a = Tensor::param(vec![0.3, 0.7], &[2]).unwrap();
        let mut b = Tensor::param(vec![0.3, 0.7], &[2]).unwrap();
        a.set_grad(vec![0.2, -0.4]);
        b.set_grad(vec![0.2, -0.4]);
        let mut adam = Adam::new();
        adam.step(&mut [ParamSlot::new("a", &mut a), ParamSlot::new("b", &mut b)], 0.01).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut w = Tensor::param(vec![1.0], &[1]).unwrap();
        w.set_grad(vec![f32::NAN]);
        let err = sgd_step(&mut [ParamSlot::new("stem.weight", &mut w)], 0.1).unwrap_err();
        match err {
            SwrError::NonFiniteGradient { param } => assert_eq!(param, "stem.weight"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn sgd_step_is_linear() {
        let mut w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        w.set_grad(vec![10.0, -10.0]);
        sgd_step(&mut [ParamSlot::new("w", &mut w)], 0.01).unwrap();
        assert_eq!(w.data(), &[0.9, 2.1]);
    }
}
