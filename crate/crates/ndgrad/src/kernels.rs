//! Hot numeric kernels.
//!
//! The training runs in this workspace are matmul-bound on a single CPU core,
//! so the three matmul variants below are register-blocked and written so LLVM
//! auto-vectorizes them (FMA via `mul_add`). `exp_slice` is a branch-free
//! Cody–Waite `exp` used by softmax/log-softmax rows, accurate to ~3e-13
//! relative — far below every tolerance in the test suite, and deterministic.
//!
//! All kernels *accumulate* into the output buffer (`c += a · b`), which is
//! what the backward pass wants; forward callers pass freshly zeroed buffers.

/// `c += a · b` where `a` is `m×k`, `b` is `k×n`, `c` is `m×n`, all row-major.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    const IB: usize = 4;
    let mut i = 0;
    while i + IB <= m {
        block_rows_nn::<IB>(a, b, c, i, k, n);
        i += IB;
    }
    while i < m {
        block_rows_nn::<1>(a, b, c, i, k, n);
        i += 1;
    }
}

/// One strip of `RB` output rows for `matmul_nn`, tiled 32/16 columns wide so
/// the accumulator tile stays in vector registers.
#[inline]
fn block_rows_nn<const RB: usize>(a: &[f64], b: &[f64], c: &mut [f64], i: usize, k: usize, n: usize) {
    let mut j = 0;
    while j + 32 <= n {
        col_tile_nn::<RB, 32>(a, b, c, i, j, k, n);
        j += 32;
    }
    while j + 16 <= n {
        col_tile_nn::<RB, 16>(a, b, c, i, j, k, n);
        j += 16;
    }
    if j < n {
        for r in 0..RB {
            let arow = &a[(i + r) * k..(i + r) * k + k];
            let crow = &mut c[(i + r) * n..(i + r) * n + n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..p * n + n];
                for q in j..n {
                    crow[q] = av.mul_add(brow[q], crow[q]);
                }
            }
        }
    }
}

#[inline]
fn col_tile_nn<const RB: usize, const CB: usize>(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    i: usize,
    j: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [[0.0f64; CB]; RB];
    for p in 0..k {
        let brow = &b[p * n + j..p * n + j + CB];
        for r in 0..RB {
            let av = a[(i + r) * k + p];
            for q in 0..CB {
                acc[r][q] = av.mul_add(brow[q], acc[r][q]);
            }
        }
    }
    for r in 0..RB {
        let crow = &mut c[(i + r) * n + j..(i + r) * n + j + CB];
        for q in 0..CB {
            crow[q] += acc[r][q];
        }
    }
}

/// `c += a · bᵀ` where `a` is `m×k`, `b` is `n×k`, `c` is `m×n`.
///
/// Transposes `b` into a scratch buffer and reuses the register-blocked
/// `matmul_nn`. The dot-product formulation this replaces kept both reads
/// contiguous but paid a horizontal reduction per output element, which
/// capped it near 9 GF/s at the attention shapes (`k = d_head`); the copy
/// is a few tens of kilobytes and the blocked kernel runs ~3x faster.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![0.0; k * n];
    transpose_into(b, &mut bt, n, k);
    matmul_nn(a, &bt, c, m, k, n);
}

/// `dst = srcᵀ` where `src` is `rows×cols`, `dst` is `cols×rows`.
///
/// Blocked 8x8 so both sides stream through cache lines instead of one of
/// them striding a full row apart on every element.
pub(crate) fn transpose_into(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    const TB: usize = 8;
    let mut i = 0;
    while i < rows {
        let ib = TB.min(rows - i);
        let mut j = 0;
        while j < cols {
            let jb = TB.min(cols - j);
            for di in 0..ib {
                let srow = &src[(i + di) * cols + j..(i + di) * cols + j + jb];
                for (dj, &v) in srow.iter().enumerate() {
                    dst[(j + dj) * rows + i + di] = v;
                }
            }
            j += TB;
        }
        i += TB;
    }
}

/// `c += aᵀ · g` where `a` is `m×k`, `g` is `m×n`, `c` is `k×n`.
///
/// Outer-product accumulation folded over blocks of `IB` input rows: each
/// `c` row is loaded and stored once per `IB` FMAs instead of once per FMA,
/// which is the difference between this kernel being store-bound and
/// FMA-bound. The per-element accumulation order stays `i`-ascending, the
/// same chain the plain row-at-a-time loop produces.
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    const IB: usize = 8;
    let mut i = 0;
    while i + IB <= m {
        row_block_tn::<IB>(a, g, c, i, k, n);
        i += IB;
    }
    while i < m {
        row_block_tn::<1>(a, g, c, i, k, n);
        i += 1;
    }
}

#[inline]
fn row_block_tn<const IB: usize>(
    a: &[f64],
    g: &[f64],
    c: &mut [f64],
    i: usize,
    k: usize,
    n: usize,
) {
    // Two output rows per pass share every `g` load, which roughly balances
    // loads against FMAs; a lone trailing row handles odd `k`.
    let mut p = 0;
    while p + 2 <= k {
        let mut av0 = [0.0f64; IB];
        let mut av1 = [0.0f64; IB];
        for r in 0..IB {
            av0[r] = a[(i + r) * k + p];
            av1[r] = a[(i + r) * k + p + 1];
        }
        let (c0, c1) = c[p * n..(p + 2) * n].split_at_mut(n);
        for q in 0..n {
            let mut acc0 = c0[q];
            let mut acc1 = c1[q];
            for r in 0..IB {
                let gv = g[(i + r) * n + q];
                acc0 = av0[r].mul_add(gv, acc0);
                acc1 = av1[r].mul_add(gv, acc1);
            }
            c0[q] = acc0;
            c1[q] = acc1;
        }
        p += 2;
    }
    if p < k {
        let mut av = [0.0f64; IB];
        for (r, slot) in av.iter_mut().enumerate() {
            *slot = a[(i + r) * k + p];
        }
        let crow = &mut c[p * n..p * n + n];
        for q in 0..n {
            let mut acc = crow[q];
            for r in 0..IB {
                acc = av[r].mul_add(g[(i + r) * n + q], acc);
            }
            crow[q] = acc;
        }
    }
}

/// `Σ x` over eight independent partial sums, so the adds pipeline instead
/// of forming one serial chain. The result differs from a strict
/// left-to-right sum only in rounding.
pub(crate) fn sum_slice(x: &[f64]) -> f64 {
    const LANES: usize = 8;
    let chunks = x.chunks_exact(LANES);
    let rem = chunks.remainder();
    let mut acc = [0.0f64; LANES];
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += v;
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for &v in rem {
        s += v;
    }
    s
}

/// `max x` with the same eight-lane structure as [`sum_slice`]; exact, since
/// max is order-independent for the non-NaN data this engine produces.
pub(crate) fn max_slice(x: &[f64]) -> f64 {
    const LANES: usize = 8;
    let chunks = x.chunks_exact(LANES);
    let rem = chunks.remainder();
    let mut acc = [f64::NEG_INFINITY; LANES];
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a = a.max(v);
        }
    }
    let mut m = f64::NEG_INFINITY;
    for a in acc {
        m = m.max(a);
    }
    for &v in rem {
        m = m.max(v);
    }
    m
}

/// `Σ (x − mean)²` over eight FMA lanes; rounding caveat as in
/// [`sum_slice`].
pub(crate) fn sq_dev_sum(x: &[f64], mean: f64) -> f64 {
    const LANES: usize = 8;
    let chunks = x.chunks_exact(LANES);
    let rem = chunks.remainder();
    let mut acc = [0.0f64; LANES];
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            let d = v - mean;
            *a = d.mul_add(d, *a);
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for &v in rem {
        let d = v - mean;
        s = d.mul_add(d, s);
    }
    s
}

/// `Σ a·b` over eight FMA lanes; rounding caveat as in [`sum_slice`].
pub(crate) fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0f64; LANES];
    for (av, bv) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = av[l].mul_add(bv[l], acc[l]);
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for (&x, &y) in ra.iter().zip(rb) {
        s = x.mul_add(y, s);
    }
    s
}

/// `dst[r, :] = scale * src[r, start..start+len]` for every row: packs a
/// column band of a row-major `rows x src_cols` matrix into a contiguous
/// `rows x len` buffer, folding in an optional scalar.
pub(crate) fn gather_cols_scaled(
    src: &[f64],
    dst: &mut [f64],
    rows: usize,
    src_cols: usize,
    start: usize,
    len: usize,
    scale: f64,
) {
    debug_assert_eq!(src.len(), rows * src_cols);
    debug_assert_eq!(dst.len(), rows * len);
    debug_assert!(start + len <= src_cols);
    for r in 0..rows {
        let s = &src[r * src_cols + start..r * src_cols + start + len];
        let d = &mut dst[r * len..(r + 1) * len];
        if scale == 1.0 {
            d.copy_from_slice(s);
        } else {
            for (dv, &sv) in d.iter_mut().zip(s) {
                *dv = scale * sv;
            }
        }
    }
}

/// `dst[r, start..start+len] = src[r, :]`: writes a contiguous `rows x len`
/// buffer back into a column band of a `rows x dst_cols` matrix.
pub(crate) fn scatter_cols(
    src: &[f64],
    dst: &mut [f64],
    rows: usize,
    dst_cols: usize,
    start: usize,
    len: usize,
) {
    debug_assert_eq!(src.len(), rows * len);
    debug_assert_eq!(dst.len(), rows * dst_cols);
    for r in 0..rows {
        dst[r * dst_cols + start..r * dst_cols + start + len]
            .copy_from_slice(&src[r * len..(r + 1) * len]);
    }
}

/// `dst[r, start..start+len] += scale * src[r, :]`: accumulating variant of
/// [`scatter_cols`] for gradient scatter.
pub(crate) fn scatter_cols_add_scaled(
    src: &[f64],
    dst: &mut [f64],
    rows: usize,
    dst_cols: usize,
    start: usize,
    len: usize,
    scale: f64,
) {
    debug_assert_eq!(src.len(), rows * len);
    debug_assert_eq!(dst.len(), rows * dst_cols);
    for r in 0..rows {
        let d = &mut dst[r * dst_cols + start..r * dst_cols + start + len];
        let s = &src[r * len..(r + 1) * len];
        for (dv, &sv) in d.iter_mut().zip(s) {
            *dv = scale.mul_add(sv, *dv);
        }
    }
}

const EXP_MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52: rounds to nearest int in the mantissa
const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

/// Branch-free elementwise `exp`, ~3e-13 relative accuracy.
///
/// Inputs are clamped to ±708 (the result saturates to `exp(±708)` instead of
/// overflowing/underflowing); softmax feeds it max-subtracted values, so the
/// clamp is never active there.
pub(crate) fn exp_slice(src: &[f64], dst: &mut [f64]) {
    debug_assert_eq!(src.len(), dst.len());
    for (d, &x) in dst.iter_mut().zip(src) {
        let xc = x.clamp(-708.0, 708.0);
        let t = xc.mul_add(LOG2E, EXP_MAGIC);
        let nf = t - EXP_MAGIC;
        let ni = (t.to_bits() & 0xFFFF_FFFF) as u32 as i32;
        let r = (-nf).mul_add(LN2_HI, xc) + (-nf) * LN2_LO;
        // Degree-10 Taylor of e^r on |r| ≤ ln2/2; remainder ≈ 2e-13 relative.
        let mut p: f64 = 1.0 / 3_628_800.0;
        p = p.mul_add(r, 1.0 / 362_880.0);
        p = p.mul_add(r, 1.0 / 40_320.0);
        p = p.mul_add(r, 1.0 / 5_040.0);
        p = p.mul_add(r, 1.0 / 720.0);
        p = p.mul_add(r, 1.0 / 120.0);
        p = p.mul_add(r, 1.0 / 24.0);
        p = p.mul_add(r, 1.0 / 6.0);
        p = p.mul_add(r, 0.5);
        p = p.mul_add(r, 1.0);
        p = p.mul_add(r, 1.0);
        let scale = f64::from_bits(((1023i64 + ni as i64) as u64) << 52);
        *d = p * scale;
    }
}

#[cfg(test)]
mod perf {
    use super::*;
    use std::time::Instant;

    #[test]
    #[ignore = "throughput probe; run with --ignored --nocapture"]
    fn probe_matmul_kernel_shapes() {
        let mk = |n: usize| -> Vec<f64> { (0..n).map(|i| (i as f64 * 0.003).sin()).collect() };
        let shapes: &[(&str, usize, usize, usize)] = &[
            ("nn 240x64x64", 240, 64, 64),
            ("nn 240x64x128", 240, 64, 128),
            ("nn 240x128x64", 240, 128, 64),
            ("nn 240x16x240", 240, 16, 240),
            ("nn 240x240x16", 240, 240, 16),
            ("nn 240x240x64", 240, 240, 64),
        ];
        for &(label, m, k, n) in shapes {
            let a = mk(m * k);
            let b = mk(k * n);
            let mut c = vec![0.0; m * n];
            let iters = 2_000;
            let t0 = Instant::now();
            for _ in 0..iters {
                matmul_nn(&a, &b, &mut c, m, k, n);
                std::hint::black_box(c[0]);
            }
            let dt = t0.elapsed().as_secs_f64();
            println!("{label}: {:.1} GF/s", (iters * 2 * m * k * n) as f64 / dt / 1e9);
        }
        for &(label, m, k, n) in &[
            ("nt k=16 240x16x240", 240usize, 16usize, 240usize),
            ("nt k=64 240x64x64", 240, 64, 64),
            ("nt k=240 240x240x64", 240, 240, 64),
        ] {
            let a = mk(m * k);
            let b = mk(n * k);
            let mut c = vec![0.0; m * n];
            let iters = 2_000;
            let t0 = Instant::now();
            for _ in 0..iters {
                matmul_nt(&a, &b, &mut c, m, k, n);
                std::hint::black_box(c[0]);
            }
            let dt = t0.elapsed().as_secs_f64();
            println!("{label}: {:.1} GF/s", (iters * 2 * m * k * n) as f64 / dt / 1e9);
        }
        for &(label, m, k, n) in &[
            ("tn 240->16x240 (dK path)", 240usize, 240usize, 16usize),
            ("tn 240->64x64", 240, 64, 64),
            ("tn 240->240x16 wide-g", 240, 16, 240),
        ] {
            let a = mk(m * k);
            let g = mk(m * n);
            let mut c = vec![0.0; k * n];
            let iters = 2_000;
            let t0 = Instant::now();
            for _ in 0..iters {
                matmul_tn(&a, &g, &mut c, m, k, n);
                std::hint::black_box(c[0]);
            }
            let dt = t0.elapsed().as_secs_f64();
            println!("{label}: {:.1} GF/s", (iters * 2 * m * k * n) as f64 / dt / 1e9);
        }
    }

    #[test]
    #[ignore = "throughput probe; run with --ignored --nocapture"]
    fn probe_exp_kernel_throughput() {
        let x: Vec<f64> = (0..57_600).map(|i| (i as f64 * 0.017).sin() * 3.0).collect();
        let mut out = vec![0.0; x.len()];
        let iters = 4_000;
        let t0 = Instant::now();
        for _ in 0..iters {
            exp_slice(&x, &mut out);
            std::hint::black_box(out[0]);
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("raw exp: {:.2} ns/elem", dt / (iters as f64 * x.len() as f64) * 1e9);

        let t0 = Instant::now();
        for _ in 0..iters {
            crate::ops::softmax_rows_inplace_for_probe(&mut out, 240, 240);
            std::hint::black_box(out[0]);
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("raw softmax(pre-expd data): {:.2} ns/elem", dt / (iters as f64 * x.len() as f64) * 1e9);
    }
}
