//! Raw numeric kernels over flat row-major slices.
//!
//! Everything here is loop-based and single-threaded. Accumulation is f32
//! and iteration order is fixed, so results are reproducible bit for bit.
//! Inner loops do not allocate.

/// out[m,n] = a[m,k] @ b[k,n]
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// da[m,k] += d[m,n] @ b[k,n]^T
pub(crate) fn matmul_d_bt(d: &[f32], b: &[f32], m: usize, k: usize, n: usize, da: &mut [f32]) {
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0f32;
            for j in 0..n {
                acc += d[i * n + j] * b[p * n + j];
            }
            da[i * k + p] += acc;
        }
    }
}

/// db[k,n] += a[m,k]^T @ d[m,n]
pub(crate) fn matmul_at_d(a: &[f32], d: &[f32], m: usize, k: usize, n: usize, db: &mut [f32]) {
    for p in 0..k {
        for j in 0..n {
            let mut acc = 0.0f32;
            for i in 0..m {
                acc += a[i * k + p] * d[i * n + j];
            }
            db[p * n + j] += acc;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv2d_forward(x: &[f32], wt: &[f32], d: &ConvDims, out: &mut [f32]) {
    let (h, w, kh, kw) = (d.h as isize, d.w as isize, d.kh, d.kw);
    let p = d.padding as isize;
    for n in 0..d.batch {
        for co in 0..d.cout {
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let mut acc = 0.0f32;
                    let base_y = (oy * d.stride) as isize - p;
                    let base_x = (ox * d.stride) as isize - p;
                    for ci in 0..d.cin {
                        let xoff = (n * d.cin + ci) * d.h * d.w;
                        let woff = ((co * d.cin + ci) * kh) * kw;
                        for ky in 0..kh {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                acc += x[xoff + iy as usize * d.w + ix as usize]
                                    * wt[woff + ky * kw + kx];
                            }
                        }
                    }
                    out[((n * d.cout + co) * d.ho + oy) * d.wo + ox] = acc;
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward(
    x: &[f32],
    wt: &[f32],
    d: &ConvDims,
    dout: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let (h, w, kh, kw) = (d.h as isize, d.w as isize, d.kh, d.kw);
    let p = d.padding as isize;
    for n in 0..d.batch {
        for co in 0..d.cout {
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let g = dout[((n * d.cout + co) * d.ho + oy) * d.wo + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let base_y = (oy * d.stride) as isize - p;
                    let base_x = (ox * d.stride) as isize - p;
                    for ci in 0..d.cin {
                        let xoff = (n * d.cin + ci) * d.h * d.w;
                        let woff = ((co * d.cin + ci) * kh) * kw;
                        for ky in 0..kh {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                let xi = xoff + iy as usize * d.w + ix as usize;
                                let wi = woff + ky * kw + kx;
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[wi] += g * x[xi];
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += g * wt[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution: one k x k kernel per channel, w laid out [C, kh, kw].
pub(crate) fn depthwise_forward(x: &[f32], wt: &[f32], d: &ConvDims, out: &mut [f32]) {
    debug_assert_eq!(d.cin, d.cout);
    let (h, w, kh, kw) = (d.h as isize, d.w as isize, d.kh, d.kw);
    let p = d.padding as isize;
    for n in 0..d.batch {
        for c in 0..d.cin {
            let xoff = (n * d.cin + c) * d.h * d.w;
            let woff = c * kh * kw;
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let mut acc = 0.0f32;
                    let base_y = (oy * d.stride) as isize - p;
                    let base_x = (ox * d.stride) as isize - p;
                    for ky in 0..kh {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = base_x + kx as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            acc += x[xoff + iy as usize * d.w + ix as usize] * wt[woff + ky * kw + kx];
                        }
                    }
                    out[((n * d.cin + c) * d.ho + oy) * d.wo + ox] = acc;
                }
            }
        }
    }
}

pub(crate) fn depthwise_backward(
    x: &[f32],
    wt: &[f32],
    d: &ConvDims,
    dout: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let (h, w, kh, kw) = (d.h as isize, d.w as isize, d.kh, d.kw);
    let p = d.padding as isize;
    for n in 0..d.batch {
        for c in 0..d.cin {
            let xoff = (n * d.cin + c) * d.h * d.w;
            let woff = c * kh * kw;
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let g = dout[((n * d.cin + c) * d.ho + oy) * d.wo + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let base_y = (oy * d.stride) as isize - p;
                    let base_x = (ox * d.stride) as isize - p;
                    for ky in 0..kh {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = base_x + kx as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let xi = xoff + iy as usize * d.w + ix as usize;
                            let wi = woff + ky * kw + kx;
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[wi] += g * x[xi];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] += g * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 1x1 convolution with weight laid out [Cout, Cin]; spatial size `hw`.
pub(crate) fn pointwise_forward(
    x: &[f32],
    wt: &[f32],
    batch: usize,
    cin: usize,
    cout: usize,
    hw: usize,
    out: &mut [f32],
) {
    for n in 0..batch {
        for co in 0..cout {
            for p in 0..hw {
                let mut acc = 0.0f32;
                for ci in 0..cin {
                    acc += x[(n * cin + ci) * hw + p] * wt[co * cin + ci];
                }
                out[(n * cout + co) * hw + p] = acc;
            }
        }
    }
}

pub(crate) fn pointwise_backward(
    x: &[f32],
    wt: &[f32],
    batch: usize,
    cin: usize,
    cout: usize,
    hw: usize,
    dout: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    for n in 0..batch {
        for co in 0..cout {
            for p in 0..hw {
                let g = dout[(n * cout + co) * hw + p];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[co * cin + ci] += g * x[(n * cin + ci) * hw + p];
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[(n * cin + ci) * hw + p] += g * wt[co * cin + ci];
                    }
                }
            }
        }
    }
}

/// Average pooling, window `k`, step `stride`, no padding.
pub(crate) fn avg_pool_forward(
    x: &[f32],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    out: &mut [f32],
) {
    let inv = 1.0 / (k * k) as f32;
    for n in 0..batch {
        for ch in 0..c {
            let xoff = (n * c + ch) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += x[xoff + (oy * stride + ky) * w + (ox * stride + kx)];
                        }
                    }
                    out[((n * c + ch) * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
    }
}

pub(crate) fn avg_pool_backward(
    batch: usize,
    c: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    h: usize,
    dout: &[f32],
    dx: &mut [f32],
) {
    let inv = 1.0 / (k * k) as f32;
    for n in 0..batch {
        for ch in 0..c {
            let xoff = (n * c + ch) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = dout[((n * c + ch) * ho + oy) * wo + ox] * inv;
                    for ky in 0..k {
                        for kx in 0..k {
                            dx[xoff + (oy * stride + ky) * w + (ox * stride + kx)] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise softmax over the trailing dimension, max-subtracted.
pub(crate) fn softmax_rows(x: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[r * cols + j] = e;
            z += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= z;
        }
    }
}

pub(crate) fn log_softmax_rows(x: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        for &v in row {
            z += (v - m).exp();
        }
        let lse = m + z.ln();
        for j in 0..cols {
            out[r * cols + j] = row[j] - lse;
        }
    }
}
