//! Dense compute kernels: GEMM variants and im2col/col2im.
//!
//! Convolutions, their adjoints, and dense layers all lower to these. Every
//! kernel accumulates in a fixed, ascending-index order per output element,
//! so results are bit-reproducible run to run on the same build.

use crate::scalar::Scalar;

/// c += a (m x k, row-major) * b (k x n, row-major); c is m x n.
///
/// i-k-j loop order: the inner loop is an axpy over contiguous rows of `b`
/// and `c`, which vectorizes well without needing any reassociation, and the
/// k-sum for each c[i][j] runs in ascending k order.
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// c += a (m x k) * b^T where b is n x k row-major; c is m x n.
/// Both operands are traversed along contiguous rows (dot products).
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

/// c += a^T * b where a is k x m and b is k x n, both row-major; c is m x n.
/// Outer loop over k keeps the inner loop an axpy over contiguous rows.
pub fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == S::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += api * brow[j];
            }
        }
    }
}

/// Out-of-place transpose: a is m x n row-major, out becomes n x m.
pub fn transpose<S: Scalar>(m: usize, n: usize, a: &[S], out: &mut Vec<S>) {
    debug_assert_eq!(a.len(), m * n);
    out.clear();
    out.resize(m * n, S::zero());
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    debug_assert!(size + 2 * pad >= kernel);
    (size + 2 * pad - kernel) / stride + 1
}

/// Unfold `x` of shape [c, h, w] into a patch matrix of shape
/// [c*kh*kw, oh*ow] (taps as rows, output positions as columns).
///
/// Row q corresponds to tap (channel, ky, kx) = (q / (kh*kw), (q / kw) % kh,
/// q % kw); column r to output position (r / ow, r % ow). Out-of-bounds taps
/// (from zero padding) contribute 0. This layout keeps the subsequent GEMMs
/// on their contiguous-row fast paths.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut Vec<S>,
) -> (usize, usize) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    out.clear();
    out.resize(c * kh * kw * oh * ow, S::zero());
    for ci in 0..c {
        let base = ci * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let orow = ((ci * kh + ky) * kw + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = base + iy as usize * w;
                    let dst = orow + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[dst + ox] = x[xrow + ix as usize];
                    }
                }
            }
        }
    }
    (oh, ow)
}

/// Adjoint of [`im2col`]: scatter-add a [c*kh*kw, oh*ow] patch matrix back
/// into an image of shape [c, h, w]. Accumulates into `x`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [S],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    debug_assert_eq!(x.len(), c * h * w);
    for ci in 0..c {
        let base = ci * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let orow = ((ci * kh + ky) * kw + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = base + iy as usize * w;
                    let src = orow + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[xrow + ix as usize] += cols[src + ox];
                    }
                }
            }
        }
    }
}
