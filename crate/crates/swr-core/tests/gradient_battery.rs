//! Finite-difference verification of every differentiable op, plus a
//! composite conv-net check against the same oracle.

use swr_core::autodiff::{ops, Tape, Tensor};
use swr_core::gradcheck::{check_input_gradient, run_battery, DEFAULT_EPS, DEFAULT_TOLERANCE};
use swr_core::SwrRng;

#[test]
fn all_ops_match_central_differences_over_20_trials() {
    let reports = run_battery(20, 0x5752_0001).unwrap();
    assert!(reports.len() >= 20, "expected a report per op, got {}", reports.len());
    for r in &reports {
        assert!(
            r.passed,
            "{}: guarded rel err {:.3e} exceeded {DEFAULT_TOLERANCE:.0e} over {} trials",
            r.op, r.max_rel_err, r.trials
        );
    }
}

/// A small conv net (conv -> relu -> depthwise -> relu -> pointwise -> gap)
/// checked against finite differences on each of its parameters.
///
/// Finite differences on a parameter are only trustworthy when no relu
/// input downstream of it sits within the perturbation's reach of the
/// kink, so trials whose pre-activations come too close are reseeded.
#[test]
fn composite_conv_net_parameters_match_finite_differences() {
    let mut rng = SwrRng::seed(0x5752_0002);
    let mut done = 0usize;
    let mut attempt = 0u64;
    while done < 20 {
        attempt += 1;
        assert!(attempt < 20_000, "could not find 20 kink-clear trials");
        let mut r = rng.split(attempt);
        let x = tensor_randn(&[1, 2, 5, 5], 1.0, &mut r);
        let w_conv = tensor_randn(&[2, 2, 3, 3], 1.0 / 18f32.sqrt(), &mut r);
        let w_dw = tensor_randn(&[2, 3, 3], 1.0, &mut r);
        let w_pw = tensor_randn(&[3, 2], 1.0 / 2f32.sqrt(), &mut r);
        let loss_w = tensor_randn(&[1, 3], 8.0, &mut r);
        let inputs = vec![x, w_conv, w_dw, w_pw, loss_w];

        if !preactivations_clear_of_kink(&inputs, 0.02) {
            continue;
        }

        let mut forward = |t: &[Tensor], tape: &mut Tape| {
            let a = ops::conv2d(tape, &t[0], &t[1], 1, 1)?;
            let a = ops::relu(tape, &a)?;
            let b = ops::depthwise_conv2d(tape, &a, &t[2], 1, 1)?;
            let b = ops::relu(tape, &b)?;
            let c = ops::pointwise_conv2d(tape, &b, &t[3])?;
            let f = ops::global_avg_pool(tape, &c)?;
            let prod = ops::mul(tape, &f, &t[4])?;
            ops::sum(tape, &prod)
        };

        for which in 1..=3 {
            let res = check_input_gradient(&mut forward, &inputs, which, DEFAULT_EPS, &mut r).unwrap();
            assert!(
                res.passes(DEFAULT_TOLERANCE),
                "trial {attempt} param {which}: analytic {:.6} vs numeric {:.6}",
                res.analytic,
                res.numeric
            );
        }
        done += 1;
    }
}

fn tensor_randn(shape: &[usize], scale: f32, rng: &mut SwrRng) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new((0..numel).map(|_| rng.normal() * scale).collect(), shape).unwrap()
}

/// Replays the net's linear pieces and reports whether every relu input is
/// at least `margin` away from zero.
fn preactivations_clear_of_kink(inputs: &[Tensor], margin: f32) -> bool {
    let mut tape = Tape::inference();
    let a = ops::conv2d(&mut tape, &inputs[0], &inputs[1], 1, 1).unwrap();
    let min_a = a.data().iter().fold(f32::INFINITY, |m, v| m.min(v.abs()));
    let a = ops::relu(&mut tape, &a).unwrap();
    let b = ops::depthwise_conv2d(&mut tape, &a, &inputs[2], 1, 1).unwrap();
    let min_b = b.data().iter().fold(f32::INFINITY, |m, v| m.min(v.abs()));
    min_a > margin && min_b > margin
}
