// Plain loops. Each product picks the loop order whose innermost index
// walks a long contiguous run, since the attention shapes mix 800-long and
// 8-long dimensions.
//
// The public kernels are recompiled for AVX2 when the CPU has it. Every
// reduction below has a fixed association order and nothing is fused into
// FMA, so both builds round identically.

/// Defines `$name` dispatching to an AVX2 build of `$body` when available.
macro_rules! wide_kernel {
    ($(#[$m:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $(-> $ret:ty)? => $body:ident) => {
        $(#[$m])*
        $vis fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                // SAFETY: AVX2 support was checked just above.
                return unsafe { wide($($arg),*) };
            }
            $body($($arg),*)
        }
    };
}

/// Below this length a contiguous inner loop is not worth vectorising.
const SHORT: usize = 32;

#[inline(always)]
fn matmul_acc_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if n < SHORT && k >= SHORT {
        let bt = transpose(b, k, n);
        return dot_rows(a, &bt, out, m, k, n);
    }
    axpy_rows(a, b, out, m, k, n);
}

#[inline(always)]
fn matmul_at_b_acc_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if n < SHORT && m >= SHORT {
        let at = transpose(a, m, k);
        let bt = transpose(b, m, n);
        return dot_rows(&at, &bt, out, k, m, n);
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline(always)]
fn matmul_a_bt_acc_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if k < SHORT && n >= SHORT {
        let bt = transpose(b, n, k);
        return axpy_rows(a, &bt, out, m, k, n);
    }
    dot_rows(a, b, out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[k×n]`, inner loop over `n`.
#[inline(always)]
fn axpy_rows(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`, inner loop over `k`.
#[inline(always)]
fn dot_rows(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight interleaved partial sums so the loop vectorises.
#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

const ROUND_MAGIC: f64 = 6755399441055744.0; // 1.5·2^52

/// `exp(x)` for `x ≤ 0`, within about 2 ulp of `f64::exp`. Branch-free so
/// softmax loops vectorise; inputs below -708 flush to zero.
#[inline(always)]
pub(crate) fn exp_nonpos(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let under = x < -708.0;
    let x = if under { -708.0 } else { x };
    let shifted = x * std::f64::consts::LOG2_E + ROUND_MAGIC;
    let k = shifted - ROUND_MAGIC;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series to r^12 on |r| ≤ ln2/2.
    let p = 1.0 / 479_001_600.0;
    let p = p * r + 1.0 / 39_916_800.0;
    let p = p * r + 1.0 / 3_628_800.0;
    let p = p * r + 1.0 / 362_880.0;
    let p = p * r + 1.0 / 40_320.0;
    let p = p * r + 1.0 / 5_040.0;
    let p = p * r + 1.0 / 720.0;
    let p = p * r + 1.0 / 120.0;
    let p = p * r + 1.0 / 24.0;
    let p = p * r + 1.0 / 6.0;
    let p = p * r + 0.5;
    let p = p * r + 1.0;
    let p = p * r + 1.0;
    let scale = f64::from_bits(shifted.to_bits().wrapping_sub(ROUND_MAGIC.to_bits()).wrapping_add(1023) << 52);
    if under {
        0.0
    } else {
        p * scale
    }
}

#[inline(always)]
fn attention_forward_body(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    (m, n, d, e): (usize, usize, usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let kt = transpose(k, n, d);
    let vt = transpose(v, n, e);
    let mut out = vec![0.0; m * e];
    let mut probs = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut probs[i * n..(i + 1) * n];
        attention_row(&q[i * d..(i + 1) * d], &kt, n, row);
        for (p, o) in out[i * e..(i + 1) * e].iter_mut().enumerate() {
            *o = dot(row, &vt[p * n..(p + 1) * n]);
        }
    }
    (out, probs)
}

/// Fills `row` with the softmax of `q_i·kᵀ`.
#[inline(always)]
fn attention_row(qi: &[f64], kt: &[f64], n: usize, row: &mut [f64]) {
    let mut j = 0;
    while j + 8 <= n {
        let mut acc = [0.0; 8];
        for (p, &qp) in qi.iter().enumerate() {
            let kr = &kt[p * n + j..p * n + j + 8];
            for l in 0..8 {
                acc[l] += qp * kr[l];
            }
        }
        row[j..j + 8].copy_from_slice(&acc);
        j += 8;
    }
    for (jj, r) in row.iter_mut().enumerate().skip(j) {
        let mut x = 0.0;
        for (p, &qp) in qi.iter().enumerate() {
            x += qp * kt[p * n + jj];
        }
        *r = x;
    }
    let max = lane_max(row);
    for r in row.iter_mut() {
        *r = exp_nonpos(*r - max);
    }
    let sum = lane_sum(row);
    for r in row.iter_mut() {
        *r /= sum;
    }
}

#[inline(always)]
fn lane_max(x: &[f64]) -> f64 {
    let mut m = [f64::NEG_INFINITY; 8];
    let chunks = x.chunks_exact(8);
    let mut out = chunks.remainder().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for c in chunks {
        for l in 0..8 {
            m[l] = if c[l] > m[l] { c[l] } else { m[l] };
        }
    }
    for v in m {
        out = out.max(v);
    }
    out
}

#[inline(always)]
fn lane_sum(x: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let chunks = x.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for l in 0..8 {
            acc[l] += c[l];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Query rows whose key and value gradients are accumulated together.
const BW_BLOCK: usize = 4;

#[inline(always)]
fn attention_backward_body(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dz: &[f64],
    (m, n, d, e): (usize, usize, usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let kt = transpose(k, n, d);
    let vt = transpose(v, n, e);
    let mut dq = vec![0.0; m * d];
    let mut dkt = vec![0.0; d * n];
    let mut dvt = vec![0.0; e * n];
    let mut ds = vec![0.0; BW_BLOCK * n];
    let mut i0 = 0;
    while i0 < m {
        let rows = BW_BLOCK.min(m - i0);
        for b in 0..rows {
            let i = i0 + b;
            let dzi = &dz[i * e..(i + 1) * e];
            let a = &probs[i * n..(i + 1) * n];
            let dsb = &mut ds[b * n..(b + 1) * n];
            dsb.fill(0.0);
            for (p, &g) in dzi.iter().enumerate() {
                for (s, &vv) in dsb.iter_mut().zip(&vt[p * n..(p + 1) * n]) {
                    *s += g * vv;
                }
            }
            let c = dot(a, dsb);
            for (s, &av) in dsb.iter_mut().zip(a) {
                *s = av * (*s - c);
            }
            for p in 0..d {
                dq[i * d + p] = dot(dsb, &kt[p * n..(p + 1) * n]);
            }
        }
        // Rank-`rows` updates, added in row order.
        let blocks: Vec<&[f64]> = (0..rows).map(|b| &ds[b * n..(b + 1) * n]).collect();
        let arows: Vec<&[f64]> = (0..rows).map(|b| &probs[(i0 + b) * n..(i0 + b + 1) * n]).collect();
        for p in 0..d {
            let coef: Vec<f64> = (0..rows).map(|b| q[(i0 + b) * d + p]).collect();
            rank_update(&mut dkt[p * n..(p + 1) * n], &coef, &blocks);
        }
        for p in 0..e {
            let coef: Vec<f64> = (0..rows).map(|b| dz[(i0 + b) * e + p]).collect();
            rank_update(&mut dvt[p * n..(p + 1) * n], &coef, &arows);
        }
        i0 += rows;
    }
    (dq, transpose(&dkt, d, n), transpose(&dvt, e, n))
}

/// `out += Σ_b coef[b]·xs[b]`, terms added in order of `b`.
#[inline(always)]
fn rank_update(out: &mut [f64], coef: &[f64], xs: &[&[f64]]) {
    if let (&[c0, c1, c2, c3], &[x0, x1, x2, x3]) = (coef, xs) {
        for j in 0..out.len() {
            let mut o = out[j];
            o += c0 * x0[j];
            o += c1 * x1[j];
            o += c2 * x2[j];
            o += c3 * x3[j];
            out[j] = o;
        }
        return;
    }
    for (&c, x) in coef.iter().zip(xs) {
        for (o, &xv) in out.iter_mut().zip(x.iter()) {
            *o += c * xv;
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// Bilinear corners of a grid coordinate clamped to `[0, n-1]`: lower
/// index, upper index, upper weight, and whether the coordinate was inside.
fn bilinear_axis(x: f64, n: usize) -> (usize, usize, f64, bool) {
    let top = (n - 1) as f64;
    let inside = x > 0.0 && x < top;
    let x = x.clamp(0.0, top);
    let lo = (x.floor() as usize).min(n.saturating_sub(2));
    let hi = (lo + 1).min(n - 1);
    (lo, hi, x - lo as f64, inside)
}

/// Samples an `h×w×c` grid (row-major cells) at `(row, col)` coordinates in
/// cell units, cell centres at integers.
pub(crate) fn grid_sample_forward(feat: &[f64], coords: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let n = coords.len() / 2;
    let mut out = vec![0.0; n * c];
    for (i, o) in out.chunks_mut(c).enumerate() {
        let (r0, r1, fr, _) = bilinear_axis(coords[2 * i], h);
        let (c0, c1, fc, _) = bilinear_axis(coords[2 * i + 1], w);
        for (cell, wt) in [
            (r0 * w + c0, (1.0 - fr) * (1.0 - fc)),
            (r0 * w + c1, (1.0 - fr) * fc),
            (r1 * w + c0, fr * (1.0 - fc)),
            (r1 * w + c1, fr * fc),
        ] {
            axpy(o, &feat[cell * c..(cell + 1) * c], wt);
        }
    }
    out
}

/// Gradients of [`grid_sample_forward`] for the grid and the coordinates.
/// Coordinates outside the grid are clamped and receive zero gradient.
pub(crate) fn grid_sample_backward(
    feat: &[f64],
    coords: &[f64],
    dz: &[f64],
    (h, w, c): (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let mut df = vec![0.0; feat.len()];
    let mut dc = vec![0.0; coords.len()];
    for (i, g) in dz.chunks(c).enumerate() {
        let (r0, r1, fr, rin) = bilinear_axis(coords[2 * i], h);
        let (c0, c1, fc, cin) = bilinear_axis(coords[2 * i + 1], w);
        let cells = [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1];
        let wts = [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc];
        for (cell, wt) in cells.iter().zip(wts) {
            axpy(&mut df[cell * c..(cell + 1) * c], g, wt);
        }
        let d = cells.map(|cell| dot(&feat[cell * c..(cell + 1) * c], g));
        if rin {
            dc[2 * i] = (1.0 - fc) * (d[2] - d[0]) + fc * (d[3] - d[1]);
        }
        if cin {
            dc[2 * i + 1] = (1.0 - fr) * (d[1] - d[0]) + fr * (d[3] - d[2]);
        }
    }
    (df, dc)
}

#[inline(always)]
pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Row-wise softmax with per-row max subtraction.
pub(crate) fn softmax_rows(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let orow = &mut out[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = exp_nonpos(v - max);
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

wide_kernel!(
    /// `out[m×n] += a[m×k] · b[k×n]`
    pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) => matmul_acc_body
);
wide_kernel!(
    /// `out[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`.
    pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) => matmul_at_b_acc_body
);
wide_kernel!(
    /// `out[m×n] += a · bᵀ` with `a[m×k]`, `b[n×k]`.
    pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) => matmul_a_bt_acc_body
);
wide_kernel!(
    /// Row-by-row `softmax(q·kᵀ)·v` for `q[m×d]`, `k[n×d]`, `v[n×e]`.
    /// Returns the output and the `m×n` probabilities.
    pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], dims: (usize, usize, usize, usize)) -> (Vec<f64>, Vec<f64>) => attention_forward_body
);
wide_kernel!(
    /// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
    pub(crate) fn attention_backward(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        probs: &[f64],
        dz: &[f64],
        dims: (usize, usize, usize, usize),
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) => attention_backward_body
);
