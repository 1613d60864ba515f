//! Sequential matrix kernels for the convolution and linear paths.
//!
//! Everything here is row-major and single-threaded with a fixed reduction
//! order, which is what makes whole-model forward/backward passes bitwise
//! reproducible. The dot-product kernel (`gemm_nt`) carries the forward
//! convolutions; the axpy kernels carry the two backward products.

use super::Scalar;

/// `c[m×n] = a[m×k] · b[n×k]ᵀ` — both operands are traversed along contiguous
/// rows, so this is the fast shape. Four split accumulators keep the inner
/// loop out of a single serial dependency chain; their final summation order
/// is fixed.
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for (j, cv) in cr.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *cv = dot(ar, br);
        }
    }
    c
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (S::zero(), S::zero(), S::zero(), S::zero());
    for c in 0..chunks {
        let i = c * 4;
        s0 = s0 + a[i] * b[i];
        s1 = s1 + a[i + 1] * b[i + 1];
        s2 = s2 + a[i + 2] * b[i + 2];
        s3 = s3 + a[i + 3] * b[i + 3];
    }
    let mut tail = S::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

/// `c[m×n] += a[m×k] · b[k×n]` in axpy form: for each `a[i][l]`, scale row `l`
/// of `b` into row `i` of `c`. The `l` loop order fixes the reduction order.
pub fn gemm_nn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let cr = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == S::zero() {
                continue;
            }
            let br = &b[l * n..(l + 1) * n];
            for (cv, bv) in cr.iter_mut().zip(br) {
                *cv = *cv + av * *bv;
            }
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]` — the weight-gradient shape.
pub fn gemm_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == S::zero() {
                continue;
            }
            let cr = &mut c[l * n..(l + 1) * n];
            for (cv, bv) in cr.iter_mut().zip(br) {
                *cv = *cv + av * *bv;
            }
        }
    }
}

/// Lowers one image's receptive fields to rows: output `[oh·ow, cin·kh·kw]`,
/// one row per output position, zero-filled where the window leaves the
/// padded input. `x` is a single image `[cin, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Vec<S> {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad);
    let feat = cin * kh * kw;
    let mut cols = vec![S::zero(); oh * ow * feat];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * feat..(oy * ow + ox + 1) * feat];
            let iy0 = (oy * stride.0) as isize - pad.0 as isize;
            let ix0 = (ox * stride.1) as isize - pad.1 as isize;
            let mut f = 0;
            for c in 0..cin {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        f += kw;
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            row[f] = line[ix as usize];
                        }
                        f += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds column-row gradients back to image layout; exact adjoint of
/// [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<S: Scalar>(
    cols: &[S],
    dx: &mut [S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
) {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad);
    let feat = cin * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * feat..(oy * ow + ox + 1) * feat];
            let iy0 = (oy * stride.0) as isize - pad.0 as isize;
            let ix0 = (ox * stride.1) as isize - pad.1 as isize;
            let mut f = 0;
            for c in 0..cin {
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        f += kw;
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            let idx = c * h * w + iy as usize * w + ix as usize;
                            dx[idx] = dx[idx] + row[f];
                        }
                        f += 1;
                    }
                }
            }
        }
    }
}

/// Output spatial dims for a conv/pool window: `(d + 2p − k)/s + 1` per axis.
pub fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
) -> (usize, usize) {
    (
        (h + 2 * pad.0 - kh) / stride.0 + 1,
        (w + 2 * pad.1 - kw) / stride.1 + 1,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nt_matches_naive() {
        // 2x3 · (4x3)ᵀ
        let a = [1., 2., 3., 4., 5., 6.];
        let b = [1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 1., 1.];
        let c = gemm_nt(&a, &b, 2, 3, 4);
        assert_eq!(c, vec![1., 2., 3., 6., 4., 5., 6., 15.]);
    }

    #[test]
    fn axpy_kernels_agree_with_dot_kernel() {
        let m = 3;
        let k = 5;
        let n = 4;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.11 + 0.5).collect();
        // b transposed so gemm_nt computes the same product
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let via_nt = gemm_nt(&a, &bt, m, k, n);
        let mut via_nn = vec![0.0; m * n];
        gemm_nn_acc(&a, &b, &mut via_nn, m, k, n);
        for (x, y) in via_nt.iter().zip(&via_nn) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tn_kernel_transposes_left_operand() {
        // aᵀ·b with a = [[1,2],[3,4]] (m=2,k=2), b = [[5],[6]] (m=2,n=1)
        let a = [1., 2., 3., 4.];
        let b = [5., 6.];
        let mut c = vec![0.0f64; 2];
        gemm_tn_acc(&a, &b, &mut c, 2, 2, 1);
        assert_eq!(c, vec![23., 34.]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish x, y
        let (cin, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..cin * h * w).map(|i| (i as f64 * 0.713).sin()).collect();
        let cols = im2col(&x, cin, h, w, k, k, (1, 1), (1, 1));
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.327).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_acc(&y, &mut back, cin, h, w, k, k, (1, 1), (1, 1));
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn out_dims_formula() {
        assert_eq!(conv_out_dims(160, 160, 3, 3, (2, 2), (1, 1)), (80, 80));
        assert_eq!(conv_out_dims(5, 5, 5, 5, (1, 1), (2, 2)), (5, 5));
        assert_eq!(conv_out_dims(3, 3, 3, 3, (1, 1), (0, 0)), (1, 1));
    }
}
