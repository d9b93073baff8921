//! Pure forward/backward routines on raw `f64` slices.
//!
//! Everything here is free of tape bookkeeping: `tape.rs` owns graph
//! structure and calls into these for the arithmetic. Keeping the math in
//! plain functions makes each backward formula testable in isolation.

use crate::kernels::exp_slice;

/// Row-wise softmax over the last axis of a `rows × cols` matrix.
pub(crate) fn softmax_rows(x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    let mut shifted = vec![0.0; cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mx = crate::kernels::max_slice(xr);
        for (s, &v) in shifted.iter_mut().zip(xr) {
            *s = v - mx;
        }
        exp_slice(&shifted, or);
        let sum = crate::kernels::sum_slice(or);
        let inv = 1.0 / sum;
        for v in or.iter_mut() {
            *v *= inv;
        }
    }
}

/// Row softmax computed in place, same shift-exp-normalize steps as
/// [`softmax_rows`].
pub(crate) fn softmax_rows_inplace(x: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    let mut shifted = vec![0.0; cols];
    for r in 0..rows {
        let xr = &mut x[r * cols..(r + 1) * cols];
        let mx = crate::kernels::max_slice(xr);
        for (s, &v) in shifted.iter_mut().zip(xr.iter()) {
            *s = v - mx;
        }
        exp_slice(&shifted, xr);
        let sum = crate::kernels::sum_slice(xr);
        let inv = 1.0 / sum;
        for v in xr.iter_mut() {
            *v *= inv;
        }
    }
}


/// Test-only alias so the kernel probe can time the full softmax path.
#[cfg(test)]
pub(crate) fn softmax_rows_inplace_for_probe(x: &mut [f64], rows: usize, cols: usize) {
    softmax_rows_inplace(x, rows, cols);
}

/// `log(Σ exp(row))` for one row, max-shifted for stability.
///
/// Both `cross_entropy` and `log_softmax` are defined through this helper so
/// `cross_entropy(x, j)` equals `-log_softmax(x)[j]` bit-for-bit.
pub(crate) fn row_lse(row: &[f64]) -> f64 {
    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = vec![0.0; row.len()];
    let shifted: Vec<f64> = row.iter().map(|&v| v - mx).collect();
    exp_slice(&shifted, &mut e);
    let sum: f64 = e.iter().sum();
    mx + sum.ln()
}

/// GELU (tanh approximation). Returns `tanh(u)` per element for the backward
/// pass, where `u = √(2/π)·(x + 0.044715·x³)`.
///
/// Chunked through stack buffers (`tanh` via `exp(2u)`) so the whole op is
/// one fused pass with no heap temporaries.
pub(crate) fn gelu_forward(x: &[f64], y: &mut [f64], tanh_u: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    debug_assert_eq!(x.len(), tanh_u.len());
    const C: f64 = 0.044715;
    let s = (2.0 / std::f64::consts::PI).sqrt();
    const CH: usize = 256;
    let mut arg = [0.0f64; CH];
    let mut e = [0.0f64; CH];
    let mut off = 0;
    while off < x.len() {
        let len = CH.min(x.len() - off);
        let xs = &x[off..off + len];
        for (a, &xv) in arg[..len].iter_mut().zip(xs) {
            *a = 2.0 * (s * (xv + C * xv * xv * xv));
        }
        exp_slice(&arg[..len], &mut e[..len]);
        let ts = &mut tanh_u[off..off + len];
        for (t, &ev) in ts.iter_mut().zip(&e[..len]) {
            *t = (ev - 1.0) / (ev + 1.0);
        }
        for ((yo, &xv), &t) in y[off..off + len].iter_mut().zip(xs).zip(ts.iter()) {
            *yo = 0.5 * xv * (1.0 + t);
        }
        off += len;
    }
}

/// d/dx of the tanh-approximation GELU, given the saved `tanh(u)`.
pub(crate) fn gelu_backward(x: &[f64], tanh_u: &[f64], g: &[f64], dx: &mut [f64]) {
    const C: f64 = 0.044715;
    let s = (2.0 / std::f64::consts::PI).sqrt();
    for (((d, &xv), &t), &gv) in dx.iter_mut().zip(x).zip(tanh_u).zip(g) {
        let du = s * (1.0 + 3.0 * C * xv * xv);
        let slope = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
        *d += gv * slope;
    }
}

/// Numerically stable softplus `ln(1 + eˣ)`.
pub(crate) fn softplus_forward(x: &[f64], y: &mut [f64]) {
    for (yo, &v) in y.iter_mut().zip(x) {
        *yo = v.max(0.0) + (-v.abs()).exp().ln_1p();
    }
}

/// Softplus derivative is the logistic sigmoid.
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Output length of a 1-D convolution.
pub(crate) fn conv1d_out_len(l: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = l + 2 * padding;
    if span < k {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Zero-padded strided 1-D convolution.
///
/// `input` is `[batch, c_in, l]`, `weight` is `[c_out, c_in, k]`, `bias` is
/// `[c_out]`, `out` is `[batch, c_out, l_out]` and must arrive zeroed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
    batch: usize,
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) {
    let l_out = conv1d_out_len(l, k, stride, padding).expect("validated by caller");
    debug_assert_eq!(out.len(), batch * c_out * l_out);
    // Lowered to a matmul: the window length `l_out` is a handful of samples
    // at this workspace's shapes, far too short a loop to vectorize, so the
    // windows are unrolled into a `[c_in·k, batch·l_out]` patch matrix and
    // the whole convolution becomes one wide `[c_out, batch·l_out]` product.
    let rows = batch * l_out;
    let ck = c_in * k;
    let cols_t = im2col_transposed(input, batch, c_in, l, k, stride, padding, l_out);
    let mut y = vec![0.0; c_out * rows];
    crate::kernels::matmul_nn(weight, &cols_t, &mut y, c_out, ck, rows);
    for b in 0..batch {
        for co in 0..c_out {
            let orow = &mut out[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
            let yrow = &y[co * rows + b * l_out..co * rows + b * l_out + l_out];
            for (o, &v) in orow.iter_mut().zip(yrow) {
                *o = v + bias[co];
            }
        }
    }
}

/// The transposed im2col patch matrix: row `ci·k + kk` holds
/// `input[b, ci, t·stride + kk − padding]` across all `(b, t)` output
/// positions, zero where the window hangs past the signal.
#[allow(clippy::too_many_arguments)]
fn im2col_transposed(
    input: &[f64],
    batch: usize,
    c_in: usize,
    l: usize,
    k: usize,
    stride: usize,
    padding: usize,
    l_out: usize,
) -> Vec<f64> {
    let rows = batch * l_out;
    let mut cols_t = vec![0.0; c_in * k * rows];
    for ci in 0..c_in {
        for kk in 0..k {
            let dst = &mut cols_t[(ci * k + kk) * rows..(ci * k + kk + 1) * rows];
            let base = kk as isize - padding as isize;
            for b in 0..batch {
                let irow = &input[(b * c_in + ci) * l..(b * c_in + ci + 1) * l];
                let drow = &mut dst[b * l_out..(b + 1) * l_out];
                for (t, slot) in drow.iter_mut().enumerate() {
                    let j = (t * stride) as isize + base;
                    if j >= 0 && (j as usize) < l {
                        *slot = irow[j as usize];
                    }
                }
            }
        }
    }
    cols_t
}

/// Gradients of `conv1d_forward` w.r.t. input, weight, and bias; all three
/// accumulate into the provided buffers. Same matmul lowering as the
/// forward pass, with the input-gradient windows scattered back at the end.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    input: &[f64],
    weight: &[f64],
    g: &[f64],
    d_input: &mut [f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    batch: usize,
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) {
    let l_out = conv1d_out_len(l, k, stride, padding).expect("validated by caller");
    let rows = batch * l_out;
    let ck = c_in * k;
    // g regrouped channel-major to match the lowered layout.
    let mut g_t = vec![0.0; c_out * rows];
    for b in 0..batch {
        for co in 0..c_out {
            g_t[co * rows + b * l_out..co * rows + (b + 1) * l_out]
                .copy_from_slice(&g[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out]);
        }
    }
    for co in 0..c_out {
        d_bias[co] += crate::kernels::sum_slice(&g_t[co * rows..(co + 1) * rows]);
    }
    let cols_t = im2col_transposed(input, batch, c_in, l, k, stride, padding, l_out);
    // dW[co, ck] += g_t[co, :] · cols_tᵀ[:, ck]
    crate::kernels::matmul_nt(&g_t, &cols_t, d_weight, c_out, rows, ck);
    // d(cols_t)[ck, rows] = wᵀ · g_t, then each window column scatters back
    // onto the input positions it covered.
    let mut d_cols = vec![0.0; ck * rows];
    crate::kernels::matmul_tn(weight, &g_t, &mut d_cols, c_out, ck, rows);
    for ci in 0..c_in {
        for kk in 0..k {
            let src = &d_cols[(ci * k + kk) * rows..(ci * k + kk + 1) * rows];
            let base = kk as isize - padding as isize;
            for b in 0..batch {
                let drow = &mut d_input[(b * c_in + ci) * l..(b * c_in + ci + 1) * l];
                let srow = &src[b * l_out..(b + 1) * l_out];
                for (t, &v) in srow.iter().enumerate() {
                    let j = (t * stride) as isize + base;
                    if j >= 0 && (j as usize) < l {
                        drow[j as usize] += v;
                    }
                }
            }
        }
    }
}

/// Row-wise layer norm: `y = γ ⊙ (x − μ)/√(σ² + eps) + β`.
///
/// Returns per-row `(mean, inv_std)` for the backward pass.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    y: &mut [f64],
    stats: &mut Vec<(f64, f64)>,
    rows: usize,
    cols: usize,
    eps: f64,
) {
    stats.clear();
    let inv_n = 1.0 / cols as f64;
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let yr = &mut y[r * cols..(r + 1) * cols];
        let mean = crate::kernels::sum_slice(xr) * inv_n;
        let var = crate::kernels::sq_dev_sum(xr, mean) * inv_n;
        let inv_std = 1.0 / (var + eps).sqrt();
        stats.push((mean, inv_std));
        for c in 0..cols {
            let xhat = (xr[c] - mean) * inv_std;
            yr[c] = xhat.mul_add(gamma[c], beta[c]);
        }
    }
}

/// Backward of `layer_norm_forward`; accumulates into `dx`, `d_gamma`, `d_beta`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    x: &[f64],
    gamma: &[f64],
    stats: &[(f64, f64)],
    g: &[f64],
    dx: &mut [f64],
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
    rows: usize,
    cols: usize,
) {
    let inv_n = 1.0 / cols as f64;
    // dxhat = g ⊙ γ; dx = inv_std · (dxhat − mean(dxhat) − xhat · mean(dxhat ⊙ xhat))
    let mut xhat = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let (mean, inv_std) = stats[r];
        let xr = &x[r * cols..(r + 1) * cols];
        let gr = &g[r * cols..(r + 1) * cols];
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for c in 0..cols {
            xhat[c] = (xr[c] - mean) * inv_std;
            dxhat[c] = gr[c] * gamma[c];
        }
        for c in 0..cols {
            d_gamma[c] = gr[c].mul_add(xhat[c], d_gamma[c]);
            d_beta[c] += gr[c];
        }
        let m1 = crate::kernels::sum_slice(&dxhat) * inv_n;
        let m2 = crate::kernels::dot_slice(&dxhat, &xhat) * inv_n;
        for c in 0..cols {
            dxr[c] += inv_std * (dxhat[c] - m1 - xhat[c] * m2);
        }
    }
}
