//! Pure numerical kernels behind the tape ops.
//!
//! Every function here is a plain deterministic loop over flat row-major
//! buffers; the tape handles shape checking and gradient wiring.

use crate::scalar::{normal_cdf, normal_pdf, Scalar};

/// C[m,n] = A[m,k] * B[k,n]. i-k-j loop order keeps B and C row accesses
/// sequential.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &b_kj) in o_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
}

pub fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize, out: &mut [S]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
}

/// Row-stochastic softmax along `axis` with max-subtraction. Trailing axes
/// get a contiguous fast path; attention rows always hit it.
pub fn softmax_axis<S: Scalar>(x: &[S], shape: &[usize], axis: usize, out: &mut [S]) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    if inner == 1 {
        for lane in 0..outer {
            let row = &x[lane * n..(lane + 1) * n];
            let o_row = &mut out[lane * n..(lane + 1) * n];
            let mut max = S::neg_infinity();
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for (o, &v) in o_row.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            let inv = S::one() / sum;
            for o in o_row.iter_mut() {
                *o *= inv;
            }
        }
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = S::neg_infinity();
            for j in 0..n {
                let v = x[base + j * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for j in 0..n {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            let inv = S::one() / sum;
            for j in 0..n {
                out[base + j * inner] *= inv;
            }
        }
    }
}

/// x * Phi(x) with the exact erf-based Gaussian CDF.
pub fn gelu<S: Scalar>(x: S) -> S {
    x * normal_cdf(x)
}

/// n-th derivative of gelu. Order 1 is Phi(x) + x*phi(x); higher orders are
/// phi(x) * p_n(x) with p_2 = 2 - x^2 and p_{n+1} = p_n' - x * p_n.
pub fn gelu_deriv<S: Scalar>(x: S, order: u32) -> S {
    assert!(order >= 1);
    if order == 1 {
        return normal_cdf(x) + x * normal_pdf(x);
    }
    // Polynomial coefficients in ascending powers, exact in f64.
    let mut poly: Vec<f64> = vec![2.0, 0.0, -1.0];
    for _ in 2..order {
        // next = poly' - x * poly
        let mut next = vec![0.0; poly.len() + 1];
        for (p, &c) in poly.iter().enumerate() {
            if p > 0 {
                next[p - 1] += c * p as f64;
            }
            next[p + 1] -= c;
        }
        poly = next;
    }
    let mut acc = S::zero();
    for &c in poly.iter().rev() {
        acc = acc * x + S::c(c);
    }
    normal_pdf(x) * acc
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn leaky_relu<S: Scalar>(x: S, slope: S) -> S {
    if x >= S::zero() {
        x
    } else {
        slope * x
    }
}

/// Numerically stable mean binary cross-entropy with logits:
/// mean(max(x,0) - x*y + ln(1 + exp(-|x|))).
pub fn bce_with_logits<S: Scalar>(logits: &[S], targets: &[S]) -> S {
    let mut total = S::zero();
    for (&x, &y) in logits.iter().zip(targets) {
        let pos = if x > S::zero() { x } else { S::zero() };
        total += pos - x * y + (-x.abs()).exp().ln_1p();
    }
    total / S::from_usize(logits.len()).unwrap()
}

/// Gathers padded convolution patches into a `[C_in*kh*kw, OH*OW]` matrix.
/// Row index runs over (ci, ky, kx) lexicographically so a matmul over it
/// accumulates in the same order as a direct nested-loop convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<S: Scalar>(
    x: &[S],
    c_in: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut cols = vec![S::zero(); c_in * kh * kw * oh * ow];
    let patch = oh * ow;
    for ci in 0..c_in {
        let x_plane = &x[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * patch;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    let src_row = iy as usize * wd;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < wd as isize {
                            *d = x_plane[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back to the input.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    c_in: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [S],
) {
    let patch = oh * ow;
    for ci in 0..c_in {
        let o_plane = &mut out[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * patch;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = iy as usize * wd;
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < wd as isize {
                            o_plane[dst_row + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// C[m,n] += A^T[m,k] * B[k,n] with A stored as [k, m].
fn matmul_at<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize, out: &mut [S]) {
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &a_ki) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_kj) in o_row.iter_mut().zip(b_row) {
                *o += a_ki * b_kj;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B^T[k,n] with B stored as [n, k].
fn matmul_bt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// Adjoint of [`conv2d`] in its input: col2im(W^T x g), so
/// <conv_grad_input(g,w), u> == <g, conv2d(u,w)> up to rounding.
#[allow(clippy::too_many_arguments)]
pub fn conv_grad_input<S: Scalar>(
    g: &[S],
    w: &[S],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [S],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(g.len(), c_out * oh * ow);
    debug_assert_eq!(out.len(), c_in * h * wd);
    let mut cols = vec![S::zero(); c_in * kh * kw * oh * ow];
    matmul_at(w, g, c_out, c_in * kh * kw, oh * ow, &mut cols);
    col2im(&cols, c_in, h, wd, kh, kw, stride, pad, oh, ow, out);
}

/// Adjoint of [`conv2d`] in its weights: g x cols^T. A cached patch matrix
/// from the forward pass can be supplied to skip the gather.
#[allow(clippy::too_many_arguments)]
pub fn conv_grad_weight<S: Scalar>(
    x: &[S],
    g: &[S],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cached_cols: Option<&[S]>,
    out: &mut [S],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(out.len(), c_out * c_in * kh * kw);
    match cached_cols {
        Some(cols) => matmul_bt(g, cols, c_out, oh * ow, c_in * kh * kw, out),
        None => {
            let cols = im2col(x, c_in, h, wd, kh, kw, stride, pad, oh, ow);
            matmul_bt(g, &cols, c_out, oh * ow, c_in * kh * kw, out);
        }
    }
}

/// conv2d that also returns the patch matrix for reuse in the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_keep_cols<S: Scalar>(
    x: &[S],
    w: &[S],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [S],
) -> Vec<S> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let cols = im2col(x, c_in, h, wd, kh, kw, stride, pad, oh, ow);
    matmul(w, &cols, c_out, c_in * kh * kw, oh * ow, out);
    cols
}
