//! Central finite-difference verification of recorded gradients.
//!
//! The checker compares the analytic directional derivative `g . v` against
//! a central difference of the forward value along the same direction `v`.
//! Directions have +/-1 entries, so each coordinate is perturbed by exactly
//! `eps`. When a directional derivative is too small for a meaningful
//! relative comparison, the direction is redrawn; if the gradient really is
//! near zero the check falls back to an absolute gap bound.

use crate::autodiff::{ops, Tape, Tensor};
use crate::error::Result;
use crate::rng::SwrRng;

pub const DEFAULT_EPS: f32 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Guard on the comparison denominator. A forward value of size |L| carries
/// f32 rounding of about |L| * 6e-8, which the central difference divides
/// by 2 * eps; directional derivatives below this floor would drown in that
/// noise, so directions are redrawn until the derivative clears it and the
/// error is measured against max(|analytic|, |numeric|, floor).
const RELATIVE_FLOOR: f64 = 4.0;

pub type ForwardFn<'a> = dyn FnMut(&[Tensor], &mut Tape) -> Result<Tensor> + 'a;

#[derive(Clone, Copy, Debug)]
pub struct DirectionalCheck {
    pub analytic: f64,
    pub numeric: f64,
}

impl DirectionalCheck {
    /// Relative error with the denominator guarded by [`RELATIVE_FLOOR`].
    pub fn rel_err(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(RELATIVE_FLOOR);
        (self.analytic - self.numeric).abs() / denom
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.rel_err() < tolerance
    }
}

fn eval_scalar(forward: &mut ForwardFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::inference();
    let out = forward(inputs, &mut tape)?;
    Ok(out.item() as f64)
}

/// Check the gradient of `forward`'s scalar output with respect to
/// `inputs[which]`. The closure must be a pure function of the given
/// tensors (stochastic ops must replay identical noise on every call).
pub fn check_input_gradient(
    forward: &mut ForwardFn,
    inputs: &[Tensor],
    which: usize,
    eps: f32,
    rng: &mut SwrRng,
) -> Result<DirectionalCheck> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let probe = Tensor::param(inputs[which].data().to_vec(), inputs[which].shape())?;
    work[which] = probe.clone();
    let mut tape = Tape::new();
    let loss = forward(&work, &mut tape)?;
    tape.backward(&loss)?;
    let grad = probe.grad().unwrap_or_else(|| vec![0.0; probe.numel()]);

    let base = inputs[which].data();
    let mut last = DirectionalCheck { analytic: 0.0, numeric: 0.0 };
    for _attempt in 0..12 {
        let dir: Vec<f32> = (0..base.len())
            .map(|_| if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 })
            .collect();
        let analytic: f64 = grad.iter().zip(&dir).map(|(&g, &v)| g as f64 * v as f64).sum();

        let plus: Vec<f32> = base.iter().zip(&dir).map(|(x, v)| x + eps * v).collect();
        let minus: Vec<f32> = base.iter().zip(&dir).map(|(x, v)| x - eps * v).collect();
        work[which] = Tensor::new(plus, inputs[which].shape())?;
        let lp = eval_scalar(forward, &work)?;
        work[which] = Tensor::new(minus, inputs[which].shape())?;
        let lm = eval_scalar(forward, &work)?;
        let numeric = (lp - lm) / (2.0 * eps as f64);

        last = DirectionalCheck { analytic, numeric };
        if analytic.abs().max(numeric.abs()) >= RELATIVE_FLOOR {
            return Ok(last);
        }
    }
    Ok(last)
}

#[derive(Clone, Debug)]
pub struct BatteryReport {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub worst_abs_gap: f64,
    pub passed: bool,
}

struct Battery {
    rng: SwrRng,
    trials: usize,
    reports: Vec<BatteryReport>,
}

impl Battery {
    /// Run `trials` checks of one op. `build` creates the op inputs and a
    /// list of which indices to differentiate against.
    fn run(
        &mut self,
        op: &'static str,
        mut build: impl FnMut(&mut SwrRng) -> (Vec<Tensor>, Vec<usize>),
        mut forward: impl FnMut(&[Tensor], &mut Tape) -> Result<Tensor>,
    ) -> Result<()> {
        let mut max_rel = 0.0f64;
        let mut worst_gap = 0.0f64;
        let mut passed = true;
        for trial in 0..self.trials {
            let mut trial_rng = self.rng.split(fnv_tag(op)).split(trial as u64);
            let (inputs, check) = build(&mut trial_rng);
            for which in check {
                let res =
                    check_input_gradient(&mut forward, &inputs, which, DEFAULT_EPS, &mut trial_rng)?;
                max_rel = max_rel.max(res.rel_err());
                worst_gap = worst_gap.max((res.analytic - res.numeric).abs());
                passed &= res.passes(DEFAULT_TOLERANCE);
            }
        }
        self.reports.push(BatteryReport {
            op,
            trials: self.trials,
            max_rel_err: max_rel,
            worst_abs_gap: worst_gap,
            passed,
        });
        Ok(())
    }
}

fn fnv_tag(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn randn(shape: &[usize], rng: &mut SwrRng) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new((0..numel).map(|_| rng.normal()).collect(), shape).unwrap()
}

/// Normal values scaled by 1/sqrt(fan_in) so op outputs stay O(1), keeping
/// the f32 rounding of the forward value small next to the derivative.
fn randn_scaled(shape: &[usize], fan_in: usize, rng: &mut SwrRng) -> Tensor {
    let numel: usize = shape.iter().product();
    let scale = 1.0 / (fan_in as f32).sqrt();
    Tensor::new((0..numel).map(|_| rng.normal() * scale).collect(), shape).unwrap()
}

/// Normal values pushed away from zero, for ops with a kink at the origin.
fn randn_off_zero(shape: &[usize], margin: f32, rng: &mut SwrRng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let v = rng.normal();
            v + margin * v.signum()
        })
        .collect();
    Tensor::new(data, shape).unwrap()
}

/// loss = sum(y . w): turns any op output into a scalar with O(1) entries
/// of gradient everywhere.
fn weighted_sum(tape: &mut Tape, y: &Tensor, w: &Tensor) -> Result<Tensor> {
    let prod = ops::mul(tape, y, w)?;
    ops::sum(tape, &prod)
}

/// Verify every differentiable op against central finite differences.
pub fn run_battery(trials: usize, seed: u64) -> Result<Vec<BatteryReport>> {
    let mut b = Battery { rng: SwrRng::seed(seed), trials, reports: Vec::new() };

    b.run(
        "matmul",
        |r| {
            let (m, k, n) = (2 + r.below(4), 2 + r.below(4), 2 + r.below(4));
            let a = randn(&[m, k], r);
            let w = randn_scaled(&[k, n], k, r);
            let lw = randn(&[m, n], r);
            (vec![a, w, lw], vec![0, 1])
        },
        |t, tape| {
            let y = ops::matmul(tape, &t[0], &t[1])?;
            weighted_sum(tape, &y, &t[2])
        },
    )?;

    b.run(
        "conv2d",
        |r| {
            let (bsz, cin, cout) = (1 + r.below(2), 1 + r.below(3), 1 + r.below(3));
            let (h, w) = (3 + r.below(4), 3 + r.below(4));
            let k = 1 + r.below(3.min(h.min(w)));
            let stride = 1 + r.below(2);
            let padding = r.below(2);
            let x = randn(&[bsz, cin, h, w], r);
            let wt = randn_scaled(&[cout, cin, k, k], cin * k * k, r);
            let ho = (h + 2 * padding - k) / stride + 1;
            let wo = (w + 2 * padding - k) / stride + 1;
            let lw = randn(&[bsz, cout, ho, wo], r);
            let params = Tensor::new(
                vec![stride as f32, padding as f32],
                &[2],
            )
            .unwrap();
            (vec![x, wt, lw, params], vec![0, 1])
        },
        |t, tape| {
            let stride = t[3].data()[0] as usize;
            let padding = t[3].data()[1] as usize;
            let y = ops::conv2d(tape, &t[0], &t[1], stride, padding)?;
            weighted_sum(tape, &y, &t[2])
        },
    )?;

    b.run(
        "depthwise_conv2d",
        |r| {
            let (bsz, c) = (1 + r.below(2), 1 + r.below(4));
            let (h, w) = (4 + r.below(3), 4 + r.below(3));
            let k = 1 + r.below(3);
            let stride = 1 + r.below(2);
            let padding = r.below(2);
            let x = randn(&[bsz, c, h, w], r);
            let wt = randn_scaled(&[c, k, k], k * k, r);
            let ho = (h + 2 * padding - k) / stride + 1;
            let wo = (w + 2 * padding - k) / stride + 1;
            let lw = randn(&[bsz, c, ho, wo], r);
            let params = Tensor::new(vec![stride as f32, padding as f32], &[2]).unwrap();
            (vec![x, wt, lw, params], vec![0, 1])
        },
        |t, tape| {
            let stride = t[3].data()[0] as usize;
            let padding = t[3].data()[1] as usize;
            let y = ops::depthwise_conv2d(tape, &t[0], &t[1], stride, padding)?;
            weighted_sum(tape, &y, &t[2])
        },
    )?;

    b.run(
        "pointwise_conv2d",
        |r| {
            let (bsz, cin, cout) = (1 + r.below(2), 1 + r.below(4), 1 + r.below(4));
            let (h, w) = (2 + r.below(4), 2 + r.below(4));
            let x = randn(&[bsz, cin, h, w], r);
            let wt = randn_scaled(&[cout, cin], cin, r);
            let lw = randn(&[bsz, cout, h, w], r);
            (vec![x, wt, lw], vec![0, 1])
        },
        |t, tape| {
            let y = ops::pointwise_conv2d(tape, &t[0], &t[1])?;
            weighted_sum(tape, &y, &t[2])
        },
    )?;

    b.run(
        "add",
        |r| {
            let n = 3 + r.below(8);
            (vec![randn(&[n], r), randn(&[n], r), randn(&[n], r)], vec![0, 1])
        },
        |t, tape| {
            let y = ops::add(tape, &t[0], &t[1])?;
            weighted_sum(tape, &y, &t[2])
        },
    )?;

    b.run(
        "sub",
        |r| {
            let n = 3 + r.below(8);
            (vec![randn(&[n], r), randn(&[n], r), randn(&[n], r)], vec![0, 1])
        },
        |t, tape| {
            let y = ops::sub(tape, &t[0], &t[1])?;
            weighted_sum(tape, &y, &t[2])
        },
    )?;

    b.run(
        "mul",
        |r| {
            let n = 3 + r.below(8);
            (vec![randn(&[n], r), randn(&[n], r), randn(&[n], r)], vec![0, 1])
        },
        |t, tape| {
            let y = ops::mul(tape, &t[0], &t[1])?;
            weighted_sum(tape, &y, &t[2])
        },
    )?;

    b.run(
        "add_bias",
        |r| {
            let (m, n) = (2 + r.below(4), 2 + r.below(5));
            (vec![randn(&[m, n], r), randn(&[n], r), randn(&[m, n], r)], vec![0, 1])
        },
        |t, tape| {
            let y = ops::add_bias(tape, &t[0], &t[1])?;
            weighted_sum(tape, &y, &t[2])
        },
    )?;

    b.run(
        "scalar_mul",
        |r| {
            let n = 3 + r.below(8);
            (vec![randn(&[n], r), randn(&[n], r)], vec![0])
        },
        |t, tape| {
            let y = ops::scalar_mul(tape, &t[0], 0.7)?;
            weighted_sum(tape, &y, &t[1])
        },
    )?;

    b.run(
        "scale_by",
        |r| {
            let n = 3 + r.below(8);
            (vec![randn(&[1], r), randn(&[n], r), randn(&[n], r)], vec![0, 1])
        },
        |t, tape| {
            let y = ops::scale_by(tape, &t[0], &t[1])?;
            weighted_sum(tape, &y, &t[2])
        },
    )?;

    b.run(
        "relu",
        |r| {
            let n = 4 + r.below(8);
            // Inputs bounded away from the kink so the difference quotient
            // stays one-sided.
            (vec![randn_off_zero(&[n], 0.05, r), randn(&[n], r)], vec![0])
        },
        |t, tape| {
            let y = ops::relu(tape, &t[0])?;
            weighted_sum(tape, &y, &t[1])
        },
    )?;

    b.run(
        "batch_norm_train",
        |r| {
            let (bsz, c, h, w) = (2, 1 + r.below(3), 2 + r.below(3), 2 + r.below(3));
            let x = randn(&[bsz, c, h, w], r);
            let gamma = Tensor::new((0..c).map(|_| r.uniform(0.5, 1.5)).collect(), &[c]).unwrap();
            let beta = randn(&[c], r);
            let lw = randn(&[bsz, c, h, w], r);
            (vec![x, gamma, beta, lw], vec![0, 1, 2])
        },
        |t, tape| {
            let (y, _, _) = ops::batch_norm_train(tape, &t[0], &t[1], &t[2], 1e-5)?;
            weighted_sum(tape, &y, &t[3])
        },
    )?;

    b.run(
        "batch_norm_eval",
        |r| {
            let (bsz, c, h, w) = (2, 1 + r.below(3), 2 + r.below(3), 2 + r.below(3));
            let x = randn(&[bsz, c, h, w], r);
            let gamma = Tensor::new((0..c).map(|_| r.uniform(0.5, 1.5)).collect(), &[c]).unwrap();
            let beta = randn(&[c], r);
            let mean = randn(&[c], r);
            let var = Tensor::new((0..c).map(|_| r.uniform(0.3, 2.0)).collect(), &[c]).unwrap();
            let lw = randn(&[bsz, c, h, w], r);
            (vec![x, gamma, beta, mean, var, lw], vec![0, 1, 2])
        },
        |t, tape| {
            let y = ops::batch_norm_eval(tape, &t[0], &t[1], &t[2], t[3].data(), t[4].data(), 1e-5)?;
            weighted_sum(tape, &y, &t[5])
        },
    )?;

    b.run(
        "avg_pool2d",
        |r| {
            let (bsz, c) = (1 + r.below(2), 1 + r.below(3));
            let (h, w) = (4, 6);
            let x = randn(&[bsz, c, h, w], r);
            let lw = randn(&[bsz, c, 2, 3], r);
            (vec![x, lw], vec![0])
        },
        |t, tape| {
            let y = ops::avg_pool2d(tape, &t[0], 2, 2)?;
            weighted_sum(tape, &y, &t[1])
        },
    )?;

    b.run(
        "global_avg_pool",
        |r| {
            let (bsz, c, h, w) = (1 + r.below(2), 1 + r.below(4), 2 + r.below(3), 2 + r.below(3));
            let x = randn(&[bsz, c, h, w], r);
            let lw = randn(&[bsz, c], r);
            (vec![x, lw], vec![0])
        },
        |t, tape| {
            let y = ops::global_avg_pool(tape, &t[0])?;
            weighted_sum(tape, &y, &t[1])
        },
    )?;

    b.run(
        "softmax",
        |r| {
            let (m, n) = (1 + r.below(4), 2 + r.below(5));
            (vec![randn(&[m, n], r), randn(&[m, n], r)], vec![0])
        },
        |t, tape| {
            let y = ops::softmax(tape, &t[0])?;
            weighted_sum(tape, &y, &t[1])
        },
    )?;

    b.run(
        "log_softmax",
        |r| {
            let (m, n) = (1 + r.below(4), 2 + r.below(5));
            (vec![randn(&[m, n], r), randn(&[m, n], r)], vec![0])
        },
        |t, tape| {
            let y = ops::log_softmax(tape, &t[0])?;
            weighted_sum(tape, &y, &t[1])
        },
    )?;

    b.run(
        "cross_entropy",
        |r| {
            let (bsz, k) = (3 + r.below(3), 3 + r.below(4));
            let logits = randn(&[bsz, k], r);
            let labels: Vec<f32> = (0..bsz).map(|_| r.below(k) as f32).collect();
            let smoothing = if r.below(2) == 0 { 0.0 } else { 0.1 };
            let meta = Tensor::new(
                labels.into_iter().chain([smoothing]).collect::<Vec<_>>(),
                &[bsz + 1],
            )
            .unwrap();
            (vec![logits, meta], vec![0])
        },
        |t, tape| {
            let n = t[1].numel();
            let labels: Vec<usize> = t[1].data()[..n - 1].iter().map(|&v| v as usize).collect();
            let smoothing = t[1].data()[n - 1];
            ops::cross_entropy_logits(tape, &t[0], &labels, smoothing)
        },
    )?;

    b.run(
        "sum",
        |r| {
            let n = 3 + r.below(10);
            (vec![randn(&[n], r)], vec![0])
        },
        |t, tape| ops::sum(tape, &t[0]),
    )?;

    b.run(
        "abs",
        |r| {
            let n = 4 + r.below(8);
            (vec![randn_off_zero(&[n], 0.05, r), randn(&[n], r)], vec![0])
        },
        |t, tape| {
            let y = ops::abs(tape, &t[0])?;
            weighted_sum(tape, &y, &t[1])
        },
    )?;

    b.run(
        "element",
        |r| {
            let n = 4 + r.below(6);
            let idx = r.below(n);
            let mut x = randn(&[n], r);
            // Scale so the picked element carries a visible derivative.
            x = Tensor::new(x.data().iter().map(|v| v * 3.0).collect(), &[n]).unwrap();
            let meta = Tensor::new(vec![idx as f32], &[1]).unwrap();
            (vec![x, meta], vec![0])
        },
        |t, tape| {
            let idx = t[1].data()[0] as usize;
            let y = ops::element(tape, &t[0], idx)?;
            ops::scalar_mul(tape, &y, 2.0)
        },
    )?;

    b.run(
        "row",
        |r| {
            let (m, n) = (2 + r.below(4), 2 + r.below(5));
            let x = randn(&[m, n], r);
            let lw = randn(&[n], r);
            let meta = Tensor::new(vec![r.below(m) as f32], &[1]).unwrap();
            (vec![x, lw, meta], vec![0])
        },
        |t, tape| {
            let idx = t[2].data()[0] as usize;
            let y = ops::row(tape, &t[0], idx)?;
            weighted_sum(tape, &y, &t[1])
        },
    )?;

    b.run(
        "reshape",
        |r| {
            let (m, n) = (2 + r.below(3), 2 + r.below(3));
            (vec![randn(&[m, n], r), randn(&[m * n], r)], vec![0])
        },
        |t, tape| {
            let y = ops::reshape(tape, &t[0], &[t[0].numel()])?;
            weighted_sum(tape, &y, &t[1])
        },
    )?;

    // Straight-through contract: the gradient recorded by the hard
    // Gumbel-Softmax equals the gradient of the soft (tempered softmax)
    // path under identical noise, so the soft path serves as the
    // finite-difference reference.
    b.run(
        "gumbel_straight_through",
        |r| {
            let logits = randn(&[2], r);
            let lw = randn(&[2], r);
            let tau = [0.5f32, 1.0, 2.0][r.below(3)];
            let noise_seed = r.next_u64();
            let meta = Tensor::new(vec![tau, f32::from_bits((noise_seed >> 32) as u32)], &[2]).unwrap();
            let seed_lo = Tensor::new(vec![f32::from_bits(noise_seed as u32)], &[1]).unwrap();
            (vec![logits, lw, meta, seed_lo], vec![0])
        },
        |t, tape| {
            let tau = t[2].data()[0];
            let seed = ((t[2].data()[1].to_bits() as u64) << 32) | t[3].data()[0].to_bits() as u64;
            let mut noise_rng = SwrRng::seed(seed);
            if tape.is_recording() {
                // Analytic side: the hard op with straight-through gradient.
                let y = ops::gumbel_softmax_hard(tape, &t[0], tau, &mut noise_rng)?;
                weighted_sum(tape, &y, &t[1])
            } else {
                // Finite-difference side: the soft path with the same noise.
                let g = Tensor::new(vec![noise_rng.gumbel(), noise_rng.gumbel()], &[2]).unwrap();
                let z = ops::add(tape, &t[0], &g)?;
                let z = ops::scalar_mul(tape, &z, 1.0 / tau)?;
                let y = ops::softmax(tape, &z)?;
                weighted_sum(tape, &y, &t[1])
            }
        },
    )?;

    Ok(b.reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes_at_reduced_trials() {
        let reports = run_battery(3, 20260811).unwrap();
        for r in &reports {
            assert!(r.passed, "{} failed: max_rel_err {:.3e}", r.op, r.max_rel_err);
        }
        assert!(reports.len() >= 20);
    }
}
