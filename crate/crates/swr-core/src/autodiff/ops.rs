//! The differentiable operation set.
//!
//! Each public function validates shapes, runs the forward kernel, and
//! records the operation on the tape when gradient tracking applies (the
//! tape is recording and some input is either a trainable leaf or was
//! itself produced on the tape). Backward rules live on [`TapeOp`].

use crate::error::{Result, SwrError};
use crate::rng::SwrRng;

use super::kernels::{self, ConvDims};
use super::tape::{Adjoints, Tape};
use super::tensor::Tensor;

pub(crate) enum TapeOp {
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    Conv2d { x: Tensor, w: Tensor, out: Tensor, dims: ConvDims },
    Depthwise { x: Tensor, w: Tensor, out: Tensor, dims: ConvDims },
    Pointwise { x: Tensor, w: Tensor, out: Tensor },
    Add { a: Tensor, b: Tensor, out: Tensor },
    Sub { a: Tensor, b: Tensor, out: Tensor },
    Mul { a: Tensor, b: Tensor, out: Tensor },
    AddBias { x: Tensor, bias: Tensor, out: Tensor },
    ScalarMul { x: Tensor, k: f32, out: Tensor },
    ScaleBy { s: Tensor, x: Tensor, out: Tensor },
    Relu { x: Tensor, out: Tensor },
    BatchNormTrain {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        out: Tensor,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    BatchNormEval {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        out: Tensor,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    AvgPool { x: Tensor, out: Tensor, k: usize, stride: usize },
    GlobalAvgPool { x: Tensor, out: Tensor },
    Softmax { x: Tensor, out: Tensor },
    LogSoftmax { x: Tensor, out: Tensor },
    CrossEntropy { logits: Tensor, out: Tensor, labels: Vec<usize>, smoothing: f32, probs: Vec<f32> },
    Sum { x: Tensor, out: Tensor },
    Abs { x: Tensor, out: Tensor },
    Element { x: Tensor, out: Tensor, index: usize },
    Row { x: Tensor, out: Tensor, row: usize },
    Reshape { x: Tensor, out: Tensor },
    GumbelHard { logits: Tensor, out: Tensor, soft: [f32; 2], inv_tau: f32 },
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(SwrError::shape(op, format!("expected 2-d tensor, got {s:?}"))),
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(SwrError::shape(op, format!("expected 4-d tensor, got {s:?}"))),
    }
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(SwrError::shape(op, format!("expected 1-d or 2-d tensor, got {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SwrError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn conv_out(op: &'static str, extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < k {
        return Err(SwrError::shape(op, format!("kernel {k} exceeds padded extent {padded}")));
    }
    Ok((padded - k) / stride + 1)
}

pub fn matmul(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(SwrError::shape("matmul", format!("inner extents {k} vs {k2}")));
    }
    let mut out = vec![0.0f32; m * n];
    kernels::matmul(a.data(), b.data(), m, k, n, &mut out);
    let out = Tensor::new(out, &[m, n])?;
    if tape.should_record(&[a, b]) {
        tape.push(TapeOp::Matmul { a: a.clone(), b: b.clone(), out: out.clone() });
    }
    Ok(out)
}

pub fn conv2d(tape: &mut Tape, x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(SwrError::arg("conv2d", "stride must be positive"));
    }
    let (batch, cin, h, wd) = dims4("conv2d", x)?;
    let (cout, wcin, kh, kw) = dims4("conv2d", w)?;
    if cin != wcin {
        return Err(SwrError::shape(
            "conv2d",
            format!("input channels {cin} vs kernel channels {wcin}"),
        ));
    }
    let ho = conv_out("conv2d", h, kh, stride, padding)?;
    let wo = conv_out("conv2d", wd, kw, stride, padding)?;
    let dims = ConvDims { batch, cin, h, w: wd, cout, kh, kw, stride, padding, ho, wo };
    let mut out = vec![0.0f32; batch * cout * ho * wo];
    kernels::conv2d_forward(x.data(), w.data(), &dims, &mut out);
    let out = Tensor::new(out, &[batch, cout, ho, wo])?;
    if tape.should_record(&[x, w]) {
        tape.push(TapeOp::Conv2d { x: x.clone(), w: w.clone(), out: out.clone(), dims });
    }
    Ok(out)
}

/// Depthwise convolution; kernel shape [C, kh, kw].
pub fn depthwise_conv2d(
    tape: &mut Tape,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(SwrError::arg("depthwise_conv2d", "stride must be positive"));
    }
    let (batch, c, h, wd) = dims4("depthwise_conv2d", x)?;
    let (wc, kh, kw) = match w.shape() {
        [wc, kh, kw] => (*wc, *kh, *kw),
        s => {
            return Err(SwrError::shape(
                "depthwise_conv2d",
                format!("expected [C,kh,kw] kernel, got {s:?}"),
            ))
        }
    };
    if c != wc {
        return Err(SwrError::shape(
            "depthwise_conv2d",
            format!("input channels {c} vs kernel channels {wc}"),
        ));
    }
    let ho = conv_out("depthwise_conv2d", h, kh, stride, padding)?;
    let wo = conv_out("depthwise_conv2d", wd, kw, stride, padding)?;
    let dims = ConvDims { batch, cin: c, h, w: wd, cout: c, kh, kw, stride, padding, ho, wo };
    let mut out = vec![0.0f32; batch * c * ho * wo];
    kernels::depthwise_forward(x.data(), w.data(), &dims, &mut out);
    let out = Tensor::new(out, &[batch, c, ho, wo])?;
    if tape.should_record(&[x, w]) {
        tape.push(TapeOp::Depthwise { x: x.clone(), w: w.clone(), out: out.clone(), dims });
    }
    Ok(out)
}

/// 1x1 convolution; kernel shape [Cout, Cin].
pub fn pointwise_conv2d(tape: &mut Tape, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (batch, cin, h, wd) = dims4("pointwise_conv2d", x)?;
    let (cout, wcin) = dims2("pointwise_conv2d", w)?;
    if cin != wcin {
        return Err(SwrError::shape(
            "pointwise_conv2d",
            format!("input channels {cin} vs kernel channels {wcin}"),
        ));
    }
    let hw = h * wd;
    let mut out = vec![0.0f32; batch * cout * hw];
    kernels::pointwise_forward(x.data(), w.data(), batch, cin, cout, hw, &mut out);
    let out = Tensor::new(out, &[batch, cout, h, wd])?;
    if tape.should_record(&[x, w]) {
        tape.push(TapeOp::Pointwise { x: x.clone(), w: w.clone(), out: out.clone() });
    }
    Ok(out)
}

pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let out = Tensor::new(data, a.shape())?;
    if tape.should_record(&[a, b]) {
        tape.push(TapeOp::Add { a: a.clone(), b: b.clone(), out: out.clone() });
    }
    Ok(out)
}

pub fn sub(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let out = Tensor::new(data, a.shape())?;
    if tape.should_record(&[a, b]) {
        tape.push(TapeOp::Sub { a: a.clone(), b: b.clone(), out: out.clone() });
    }
    Ok(out)
}

pub fn mul(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let out = Tensor::new(data, a.shape())?;
    if tape.should_record(&[a, b]) {
        tape.push(TapeOp::Mul { a: a.clone(), b: b.clone(), out: out.clone() });
    }
    Ok(out)
}

/// x[m,n] + bias[n], broadcast over rows.
pub fn add_bias(tape: &mut Tape, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2("add_bias", x)?;
    if bias.shape() != [n] {
        return Err(SwrError::shape(
            "add_bias",
            format!("bias {:?} vs row width {n}", bias.shape()),
        ));
    }
    let mut data = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            data[i * n + j] = x.data()[i * n + j] + bias.data()[j];
        }
    }
    let out = Tensor::new(data, &[m, n])?;
    if tape.should_record(&[x, bias]) {
        tape.push(TapeOp::AddBias { x: x.clone(), bias: bias.clone(), out: out.clone() });
    }
    Ok(out)
}

/// Multiply by a compile-time constant.
pub fn scalar_mul(tape: &mut Tape, x: &Tensor, k: f32) -> Result<Tensor> {
    let data = x.data().iter().map(|v| v * k).collect();
    let out = Tensor::new(data, x.shape())?;
    if tape.should_record(&[x]) {
        tape.push(TapeOp::ScalarMul { x: x.clone(), k, out: out.clone() });
    }
    Ok(out)
}

/// Multiply by a scalar tensor; gradient flows to both factors.
pub fn scale_by(tape: &mut Tape, s: &Tensor, x: &Tensor) -> Result<Tensor> {
    if s.numel() != 1 {
        return Err(SwrError::shape("scale_by", format!("scale has shape {:?}", s.shape())));
    }
    let k = s.data()[0];
    let data = x.data().iter().map(|v| v * k).collect();
    let out = Tensor::new(data, x.shape())?;
    if tape.should_record(&[s, x]) {
        tape.push(TapeOp::ScaleBy { s: s.clone(), x: x.clone(), out: out.clone() });
    }
    Ok(out)
}

pub fn relu(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let out = Tensor::new(data, x.shape())?;
    if tape.should_record(&[x]) {
        tape.push(TapeOp::Relu { x: x.clone(), out: out.clone() });
    }
    Ok(out)
}

/// Batch statistics normalization over (batch, H, W) per channel.
///
/// Returns the output plus the batch mean and unbiased batch variance per
/// channel, which the caller folds into its running statistics.
pub fn batch_norm_train(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let (batch, c, h, w) = dims4("batch_norm", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(SwrError::shape(
            "batch_norm",
            format!("affine {:?}/{:?} vs channels {c}", gamma.shape(), beta.shape()),
        ));
    }
    let n = batch * h * w;
    let hw = h * w;
    let xd = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut acc = 0.0f32;
        for b in 0..batch {
            let off = (b * c + ch) * hw;
            for p in 0..hw {
                acc += xd[off + p];
            }
        }
        mean[ch] = acc / n as f32;
        let mut vacc = 0.0f32;
        for b in 0..batch {
            let off = (b * c + ch) * hw;
            for p in 0..hw {
                let d = xd[off + p] - mean[ch];
                vacc += d * d;
            }
        }
        var[ch] = vacc / n as f32;
    }
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0f32; xd.len()];
    let mut out = vec![0.0f32; xd.len()];
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for p in 0..hw {
                let norm = (xd[off + p] - mean[ch]) * inv_std[ch];
                xhat[off + p] = norm;
                out[off + p] = g * norm + bt;
            }
        }
    }
    // Running variance uses the unbiased estimator, matching common practice.
    let unbias = if n > 1 { n as f32 / (n - 1) as f32 } else { 1.0 };
    let var_unbiased: Vec<f32> = var.iter().map(|&v| v * unbias).collect();
    let out = Tensor::new(out, x.shape())?;
    if tape.should_record(&[x, gamma, beta]) {
        tape.push(TapeOp::BatchNormTrain {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            out: out.clone(),
            xhat,
            inv_std,
        });
    }
    Ok((out, mean, var_unbiased))
}

/// Normalization by stored statistics: a pure affine map of the input.
pub fn batch_norm_eval(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let (batch, c, h, w) = dims4("batch_norm", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(SwrError::shape(
            "batch_norm",
            format!("affine/stat extents vs channels {c}"),
        ));
    }
    let hw = h * w;
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let xd = x.data();
    let mut out = vec![0.0f32; xd.len()];
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = gamma.data()[ch] * inv_std[ch];
            let shift = beta.data()[ch] - scale * mean[ch];
            for p in 0..hw {
                out[off + p] = scale * xd[off + p] + shift;
            }
        }
    }
    let out = Tensor::new(out, x.shape())?;
    if tape.should_record(&[x, gamma, beta]) {
        tape.push(TapeOp::BatchNormEval {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            out: out.clone(),
            mean: mean.to_vec(),
            inv_std,
        });
    }
    Ok(out)
}

pub fn avg_pool2d(tape: &mut Tape, x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    if k == 0 || stride == 0 {
        return Err(SwrError::arg("avg_pool2d", "window and stride must be positive"));
    }
    let (batch, c, h, w) = dims4("avg_pool2d", x)?;
    if h < k || w < k {
        return Err(SwrError::shape("avg_pool2d", format!("window {k} exceeds input {h}x{w}")));
    }
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = vec![0.0f32; batch * c * ho * wo];
    kernels::avg_pool_forward(x.data(), batch, c, h, w, k, stride, ho, wo, &mut out);
    let out = Tensor::new(out, &[batch, c, ho, wo])?;
    if tape.should_record(&[x]) {
        tape.push(TapeOp::AvgPool { x: x.clone(), out: out.clone(), k, stride });
    }
    Ok(out)
}

/// [B, C, H, W] -> [B, C], averaging over all spatial positions.
pub fn global_avg_pool(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let (batch, c, h, w) = dims4("global_avg_pool", x)?;
    let hw = h * w;
    let inv = 1.0 / hw as f32;
    let mut out = vec![0.0f32; batch * c];
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let mut acc = 0.0f32;
            for p in 0..hw {
                acc += x.data()[off + p];
            }
            out[b * c + ch] = acc * inv;
        }
    }
    let out = Tensor::new(out, &[batch, c])?;
    if tape.should_record(&[x]) {
        tape.push(TapeOp::GlobalAvgPool { x: x.clone(), out: out.clone() });
    }
    Ok(out)
}

/// Softmax over the trailing dimension of a 1-d or 2-d tensor.
pub fn softmax(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = rows_cols("softmax", x)?;
    let mut out = vec![0.0f32; x.numel()];
    kernels::softmax_rows(x.data(), rows, cols, &mut out);
    let out = Tensor::new(out, x.shape())?;
    if tape.should_record(&[x]) {
        tape.push(TapeOp::Softmax { x: x.clone(), out: out.clone() });
    }
    Ok(out)
}

pub fn log_softmax(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = rows_cols("log_softmax", x)?;
    let mut out = vec![0.0f32; x.numel()];
    kernels::log_softmax_rows(x.data(), rows, cols, &mut out);
    let out = Tensor::new(out, x.shape())?;
    if tape.should_record(&[x]) {
        tape.push(TapeOp::LogSoftmax { x: x.clone(), out: out.clone() });
    }
    Ok(out)
}

/// Mean cross-entropy between logits [B, K] and integer labels, with
/// optional label smoothing.
pub fn cross_entropy_logits(
    tape: &mut Tape,
    logits: &Tensor,
    labels: &[usize],
    smoothing: f32,
) -> Result<Tensor> {
    let (b, k) = dims2("cross_entropy", logits)?;
    if labels.len() != b {
        return Err(SwrError::shape(
            "cross_entropy",
            format!("{b} logit rows vs {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(SwrError::arg("cross_entropy", format!("label {bad} out of range 0..{k}")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(SwrError::arg("cross_entropy", format!("smoothing {smoothing} not in [0,1)")));
    }
    let mut log_probs = vec![0.0f32; b * k];
    kernels::log_softmax_rows(logits.data(), b, k, &mut log_probs);
    let uniform = smoothing / k as f32;
    let mut loss = 0.0f32;
    for (row, &y) in labels.iter().enumerate() {
        let lp = &log_probs[row * k..(row + 1) * k];
        let mut row_loss = -(1.0 - smoothing) * lp[y];
        if smoothing > 0.0 {
            for &v in lp {
                row_loss -= uniform * v;
            }
        }
        loss += row_loss;
    }
    loss /= b as f32;
    let probs: Vec<f32> = log_probs.iter().map(|&v| v.exp()).collect();
    let out = Tensor::new(vec![loss], &[1])?;
    if tape.should_record(&[logits]) {
        tape.push(TapeOp::CrossEntropy {
            logits: logits.clone(),
            out: out.clone(),
            labels: labels.to_vec(),
            smoothing,
            probs,
        });
    }
    Ok(out)
}

/// Sum of all elements, as a scalar tensor.
pub fn sum(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let mut acc = 0.0f32;
    for &v in x.data() {
        acc += v;
    }
    let out = Tensor::new(vec![acc], &[1])?;
    if tape.should_record(&[x]) {
        tape.push(TapeOp::Sum { x: x.clone(), out: out.clone() });
    }
    Ok(out)
}

/// Element-wise absolute value; subgradient 0 at the kink.
pub fn abs(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|v| v.abs()).collect();
    let out = Tensor::new(data, x.shape())?;
    if tape.should_record(&[x]) {
        tape.push(TapeOp::Abs { x: x.clone(), out: out.clone() });
    }
    Ok(out)
}

/// Pick a single element (flat index) as a scalar tensor.
pub fn element(tape: &mut Tape, x: &Tensor, index: usize) -> Result<Tensor> {
    if index >= x.numel() {
        return Err(SwrError::shape(
            "element",
            format!("index {index} out of range for {} elements", x.numel()),
        ));
    }
    let out = Tensor::new(vec![x.data()[index]], &[1])?;
    if tape.should_record(&[x]) {
        tape.push(TapeOp::Element { x: x.clone(), out: out.clone(), index });
    }
    Ok(out)
}

/// Extract row `row` of a 2-d tensor as a 1-d tensor.
pub fn row(tape: &mut Tape, x: &Tensor, row: usize) -> Result<Tensor> {
    let (m, n) = dims2("row", x)?;
    if row >= m {
        return Err(SwrError::shape("row", format!("row {row} out of range for {m} rows")));
    }
    let data = x.data()[row * n..(row + 1) * n].to_vec();
    let out = Tensor::new(data, &[n])?;
    if tape.should_record(&[x]) {
        tape.push(TapeOp::Row { x: x.clone(), out: out.clone(), row });
    }
    Ok(out)
}

/// Same elements, new extents (row-major order preserved).
pub fn reshape(tape: &mut Tape, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(SwrError::shape(
            "reshape",
            format!("{:?} ({} elements) to {shape:?} ({numel})", x.shape(), x.numel()),
        ));
    }
    let out = Tensor::new(x.data().to_vec(), shape)?;
    if tape.should_record(&[x]) {
        tape.push(TapeOp::Reshape { x: x.clone(), out: out.clone() });
    }
    Ok(out)
}

/// Hard Gumbel-Softmax over a two-way logit pair.
///
/// The forward value is exactly one-hot; the recorded gradient is that of
/// the tempered softmax of the noised logits (straight-through).
pub fn gumbel_softmax_hard(
    tape: &mut Tape,
    logits: &Tensor,
    tau: f32,
    rng: &mut SwrRng,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(SwrError::arg("gumbel_softmax_hard", format!("tau {tau} must be positive")));
    }
    if logits.shape() != [2] {
        return Err(SwrError::shape(
            "gumbel_softmax_hard",
            format!("expected [2] logits, got {:?}", logits.shape()),
        ));
    }
    let g0 = rng.gumbel();
    let g1 = rng.gumbel();
    let z0 = (logits.data()[0] + g0) / tau;
    let z1 = (logits.data()[1] + g1) / tau;
    let m = z0.max(z1);
    let e0 = (z0 - m).exp();
    let e1 = (z1 - m).exp();
    let soft = [e0 / (e0 + e1), e1 / (e0 + e1)];
    let hard = if soft[0] >= soft[1] { [1.0, 0.0] } else { [0.0, 1.0] };
    let out = Tensor::new(hard.to_vec(), &[2])?;
    if tape.should_record(&[logits]) {
        tape.push(TapeOp::GumbelHard {
            logits: logits.clone(),
            out: out.clone(),
            soft,
            inv_tau: 1.0 / tau,
        });
    }
    Ok(out)
}

impl TapeOp {
    pub(crate) fn output_id(&self) -> u64 {
        self.out().id()
    }

    fn out(&self) -> &Tensor {
        match self {
            TapeOp::Matmul { out, .. }
            | TapeOp::Conv2d { out, .. }
            | TapeOp::Depthwise { out, .. }
            | TapeOp::Pointwise { out, .. }
            | TapeOp::Add { out, .. }
            | TapeOp::Sub { out, .. }
            | TapeOp::Mul { out, .. }
            | TapeOp::AddBias { out, .. }
            | TapeOp::ScalarMul { out, .. }
            | TapeOp::ScaleBy { out, .. }
            | TapeOp::Relu { out, .. }
            | TapeOp::BatchNormTrain { out, .. }
            | TapeOp::BatchNormEval { out, .. }
            | TapeOp::AvgPool { out, .. }
            | TapeOp::GlobalAvgPool { out, .. }
            | TapeOp::Softmax { out, .. }
            | TapeOp::LogSoftmax { out, .. }
            | TapeOp::CrossEntropy { out, .. }
            | TapeOp::Sum { out, .. }
            | TapeOp::Abs { out, .. }
            | TapeOp::Element { out, .. }
            | TapeOp::Row { out, .. }
            | TapeOp::Reshape { out, .. }
            | TapeOp::GumbelHard { out, .. } => out,
        }
    }

    pub(crate) fn backward(&self, adj: &mut Adjoints) {
        let Some(d) = adj.take(self.out()) else { return };
        match self {
            TapeOp::Matmul { a, b, out: _ } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if adj.wants(a) {
                    let mut da = vec![0.0f32; m * k];
                    kernels::matmul_d_bt(&d, b.data(), m, k, n, &mut da);
                    adj.accumulate(a, da);
                }
                if adj.wants(b) {
                    let mut db = vec![0.0f32; k * n];
                    kernels::matmul_at_d(a.data(), &d, m, k, n, &mut db);
                    adj.accumulate(b, db);
                }
            }
            TapeOp::Conv2d { x, w, out: _, dims } => {
                let want_x = adj.wants(x);
                let want_w = adj.wants(w);
                let mut dx = if want_x { Some(vec![0.0f32; x.numel()]) } else { None };
                let mut dw = if want_w { Some(vec![0.0f32; w.numel()]) } else { None };
                kernels::conv2d_backward(x.data(), w.data(), dims, &d, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    adj.accumulate(x, dx);
                }
                if let Some(dw) = dw {
                    adj.accumulate(w, dw);
                }
            }
            TapeOp::Depthwise { x, w, out: _, dims } => {
                let want_x = adj.wants(x);
                let want_w = adj.wants(w);
                let mut dx = if want_x { Some(vec![0.0f32; x.numel()]) } else { None };
                let mut dw = if want_w { Some(vec![0.0f32; w.numel()]) } else { None };
                kernels::depthwise_backward(x.data(), w.data(), dims, &d, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    adj.accumulate(x, dx);
                }
                if let Some(dw) = dw {
                    adj.accumulate(w, dw);
                }
            }
            TapeOp::Pointwise { x, w, out: _ } => {
                let (batch, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let cout = w.shape()[0];
                let hw = h * wd;
                let want_x = adj.wants(x);
                let want_w = adj.wants(w);
                let mut dx = if want_x { Some(vec![0.0f32; x.numel()]) } else { None };
                let mut dw = if want_w { Some(vec![0.0f32; w.numel()]) } else { None };
                kernels::pointwise_backward(
                    x.data(), w.data(), batch, cin, cout, hw, &d,
                    dx.as_deref_mut(), dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    adj.accumulate(x, dx);
                }
                if let Some(dw) = dw {
                    adj.accumulate(w, dw);
                }
            }
            TapeOp::Add { a, b, out: _ } => {
                if adj.wants(a) {
                    adj.accumulate(a, d.clone());
                }
                if adj.wants(b) {
                    adj.accumulate(b, d.clone());
                }
            }
            TapeOp::Sub { a, b, out: _ } => {
                if adj.wants(a) {
                    adj.accumulate(a, d.clone());
                }
                if adj.wants(b) {
                    adj.accumulate(b, d.iter().map(|v| -v).collect());
                }
            }
            TapeOp::Mul { a, b, out: _ } => {
                if adj.wants(a) {
                    adj.accumulate(a, d.iter().zip(b.data()).map(|(g, v)| g * v).collect());
                }
                if adj.wants(b) {
                    adj.accumulate(b, d.iter().zip(a.data()).map(|(g, v)| g * v).collect());
                }
            }
            TapeOp::AddBias { x, bias, out: _ } => {
                let (m, n) = (x.shape()[0], x.shape()[1]);
                if adj.wants(x) {
                    adj.accumulate(x, d.clone());
                }
                if adj.wants(bias) {
                    let mut db = vec![0.0f32; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += d[i * n + j];
                        }
                    }
                    adj.accumulate(bias, db);
                }
            }
            TapeOp::ScalarMul { x, k, out: _ } => {
                if adj.wants(x) {
                    adj.accumulate(x, d.iter().map(|v| v * k).collect());
                }
            }
            TapeOp::ScaleBy { s, x, out: _ } => {
                let k = s.data()[0];
                if adj.wants(x) {
                    adj.accumulate(x, d.iter().map(|v| v * k).collect());
                }
                if adj.wants(s) {
                    let mut acc = 0.0f32;
                    for (g, v) in d.iter().zip(x.data()) {
                        acc += g * v;
                    }
                    adj.accumulate(s, vec![acc]);
                }
            }
            TapeOp::Relu { x, out: _ } => {
                if adj.wants(x) {
                    adj.accumulate(
                        x,
                        d.iter().zip(x.data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
            }
            TapeOp::BatchNormTrain { x, gamma, beta, out: _, xhat, inv_std } => {
                let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let hw = h * w;
                let n = (batch * hw) as f32;
                // Per-channel reductions of d and d*xhat.
                let mut sum_d = vec![0.0f32; c];
                let mut sum_dx = vec![0.0f32; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for p in 0..hw {
                            sum_d[ch] += d[off + p];
                            sum_dx[ch] += d[off + p] * xhat[off + p];
                        }
                    }
                }
                if adj.wants(x) {
                    let mut dx = vec![0.0f32; x.numel()];
                    for b in 0..batch {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let g = gamma.data()[ch] * inv_std[ch];
                            let md = sum_d[ch] / n;
                            let mdx = sum_dx[ch] / n;
                            for p in 0..hw {
                                dx[off + p] = g * (d[off + p] - md - xhat[off + p] * mdx);
                            }
                        }
                    }
                    adj.accumulate(x, dx);
                }
                if adj.wants(gamma) {
                    adj.accumulate(gamma, sum_dx);
                }
                if adj.wants(beta) {
                    adj.accumulate(beta, sum_d);
                }
            }
            TapeOp::BatchNormEval { x, gamma, beta, out: _, mean, inv_std } => {
                let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let hw = h * w;
                if adj.wants(x) {
                    let mut dx = vec![0.0f32; x.numel()];
                    for b in 0..batch {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let scale = gamma.data()[ch] * inv_std[ch];
                            for p in 0..hw {
                                dx[off + p] = scale * d[off + p];
                            }
                        }
                    }
                    adj.accumulate(x, dx);
                }
                if adj.wants(gamma) || adj.wants(beta) {
                    let mut dgamma = vec![0.0f32; c];
                    let mut dbeta = vec![0.0f32; c];
                    for b in 0..batch {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for p in 0..hw {
                                let g = d[off + p];
                                dgamma[ch] += g * (x.data()[off + p] - mean[ch]) * inv_std[ch];
                                dbeta[ch] += g;
                            }
                        }
                    }
                    if adj.wants(gamma) {
                        adj.accumulate(gamma, dgamma);
                    }
                    if adj.wants(beta) {
                        adj.accumulate(beta, dbeta);
                    }
                }
            }
            TapeOp::AvgPool { x, out, k, stride } => {
                if adj.wants(x) {
                    let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                    let (ho, wo) = (out.shape()[2], out.shape()[3]);
                    let mut dx = vec![0.0f32; x.numel()];
                    kernels::avg_pool_backward(batch, c, w, *k, *stride, ho, wo, h, &d, &mut dx);
                    adj.accumulate(x, dx);
                }
            }
            TapeOp::GlobalAvgPool { x, out: _ } => {
                if adj.wants(x) {
                    let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                    let hw = h * w;
                    let inv = 1.0 / hw as f32;
                    let mut dx = vec![0.0f32; x.numel()];
                    for b in 0..batch {
                        for ch in 0..c {
                            let g = d[b * c + ch] * inv;
                            let off = (b * c + ch) * hw;
                            for p in 0..hw {
                                dx[off + p] = g;
                            }
                        }
                    }
                    adj.accumulate(x, dx);
                }
            }
            TapeOp::Softmax { x, out } => {
                if adj.wants(x) {
                    let (rows, cols) = match out.shape() {
                        [n] => (1, *n),
                        [r, c] => (*r, *c),
                        _ => unreachable!(),
                    };
                    let y = out.data();
                    let mut dx = vec![0.0f32; x.numel()];
                    for r in 0..rows {
                        let off = r * cols;
                        let mut dot = 0.0f32;
                        for j in 0..cols {
                            dot += d[off + j] * y[off + j];
                        }
                        for j in 0..cols {
                            dx[off + j] = y[off + j] * (d[off + j] - dot);
                        }
                    }
                    adj.accumulate(x, dx);
                }
            }
            TapeOp::LogSoftmax { x, out } => {
                if adj.wants(x) {
                    let (rows, cols) = match out.shape() {
                        [n] => (1, *n),
                        [r, c] => (*r, *c),
                        _ => unreachable!(),
                    };
                    let y = out.data();
                    let mut dx = vec![0.0f32; x.numel()];
                    for r in 0..rows {
                        let off = r * cols;
                        let mut sum_d = 0.0f32;
                        for j in 0..cols {
                            sum_d += d[off + j];
                        }
                        for j in 0..cols {
                            dx[off + j] = d[off + j] - y[off + j].exp() * sum_d;
                        }
                    }
                    adj.accumulate(x, dx);
                }
            }
            TapeOp::CrossEntropy { logits, out: _, labels, smoothing, probs } => {
                if adj.wants(logits) {
                    let (b, k) = (logits.shape()[0], logits.shape()[1]);
                    let scale = d[0] / b as f32;
                    let uniform = smoothing / k as f32;
                    let mut dl = vec![0.0f32; b * k];
                    for (row, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let q = uniform + if j == y { 1.0 - smoothing } else { 0.0 };
                            dl[row * k + j] = (probs[row * k + j] - q) * scale;
                        }
                    }
                    adj.accumulate(logits, dl);
                }
            }
            TapeOp::Sum { x, out: _ } => {
                if adj.wants(x) {
                    adj.accumulate(x, vec![d[0]; x.numel()]);
                }
            }
            TapeOp::Abs { x, out: _ } => {
                if adj.wants(x) {
                    adj.accumulate(
                        x,
                        d.iter()
                            .zip(x.data())
                            .map(|(g, &v)| {
                                if v > 0.0 {
                                    *g
                                } else if v < 0.0 {
                                    -*g
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
            }
            TapeOp::Element { x, out: _, index } => {
                if adj.wants(x) {
                    let mut dx = vec![0.0f32; x.numel()];
                    dx[*index] = d[0];
                    adj.accumulate(x, dx);
                }
            }
            TapeOp::Row { x, out: _, row } => {
                if adj.wants(x) {
                    let n = x.shape()[1];
                    let mut dx = vec![0.0f32; x.numel()];
                    dx[row * n..(row + 1) * n].copy_from_slice(&d);
                    adj.accumulate(x, dx);
                }
            }
            TapeOp::Reshape { x, out: _ } => {
                if adj.wants(x) {
                    adj.accumulate(x, d.clone());
                }
            }
            TapeOp::GumbelHard { logits, out: _, soft, inv_tau } => {
                if adj.wants(logits) {
                    let dot = d[0] * soft[0] + d[1] * soft[1];
                    let dl = vec![
                        soft[0] * (d[0] - dot) * inv_tau,
                        soft[1] * (d[1] - dot) * inv_tau,
                    ];
                    adj.accumulate(logits, dl);
                }
            }
        }
    }
}
