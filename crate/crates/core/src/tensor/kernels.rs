//! Raw array kernels shared by the autodiff ops: im2col/col2im patch
//! extraction and small GEMM wrappers over `ndarray`'s matrixmultiply backend.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4};

/// Output spatial size of a convolution with square kernel/stride/padding.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Gather conv patches: (B, C, H, W) -> (B, C*k*k, OH*OW).
///
/// Row index is `c*k*k + ky*k + kx`, column index is `oy*OW + ox`; out-of-bounds
/// taps read as zero.
pub fn im2col(x: &ArrayView4<f32>, k: usize, stride: usize, pad: usize) -> Array3<f32> {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut cols = Array3::<f32>::zeros((b, c * k * k, oh * ow));
    for bi in 0..b {
        let xb = x.index_axis(ndarray::Axis(0), bi);
        let mut cb = cols.index_axis_mut(ndarray::Axis(0), bi);
        for ci in 0..c {
            let xc = xb.index_axis(ndarray::Axis(0), ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ci * k * k + ky * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cb[[row, base + ox]] = xc[[iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add conv patches back onto an image: exact adjoint of [`im2col`].
///
/// `h`/`w` are the image size; the patch grid is `conv_out_size(h, ..) x
/// conv_out_size(w, ..)` and must match the column count of `cols`.
pub fn col2im(
    cols: &ArrayView3<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Array4<f32> {
    let (b, rows, l) = cols.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    assert_eq!(rows, c * k * k, "col2im: row count mismatch");
    assert_eq!(l, oh * ow, "col2im: patch count mismatch");
    let mut img = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        let cb = cols.index_axis(ndarray::Axis(0), bi);
        let mut xb = img.index_axis_mut(ndarray::Axis(0), bi);
        for ci in 0..c {
            let mut xc = xb.index_axis_mut(ndarray::Axis(0), ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ci * k * k + ky * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xc[[iy as usize, ix as usize]] += cb[[row, base + ox]];
                        }
                    }
                }
            }
        }
    }
    img
}

/// C = A (M,K) x B (K,N).
pub fn matmul2(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((a.nrows(), b.ncols()));
    ndarray::linalg::general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

/// out[b] = A (M,K) x X[b] (K,N), batched over the leading axis of `x`.
pub fn matmul_batched(a: &ArrayView2<f32>, x: &ArrayView3<f32>) -> Array3<f32> {
    let (bsz, k, n) = x.dim();
    assert_eq!(a.ncols(), k, "matmul_batched: inner dim mismatch");
    let mut out = Array3::<f32>::zeros((bsz, a.nrows(), n));
    for bi in 0..bsz {
        let xb = x.index_axis(ndarray::Axis(0), bi);
        let mut ob = out.index_axis_mut(ndarray::Axis(0), bi);
        ndarray::linalg::general_mat_mul(1.0, a, &xb, 0.0, &mut ob);
    }
    out
}

/// sum_b X[b] (M,N) x Y[b]^T (N,K) -> (M,K).
pub fn matmul_batch_reduce(x: &ArrayView3<f32>, y: &ArrayView3<f32>) -> Array2<f32> {
    let (bsz, m, n) = x.dim();
    let (by, k, ny) = y.dim();
    assert_eq!(bsz, by, "matmul_batch_reduce: batch mismatch");
    assert_eq!(n, ny, "matmul_batch_reduce: inner dim mismatch");
    let mut out = Array2::<f32>::zeros((m, k));
    for bi in 0..bsz {
        let xb = x.index_axis(ndarray::Axis(0), bi);
        let yb = y.index_axis(ndarray::Axis(0), bi);
        ndarray::linalg::general_mat_mul(1.0, &xb, &yb.t(), 1.0, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    #[test]
    fn im2col_identity_kernel() {
        // 1x1 kernel, stride 1, no pad: cols are just the flattened image.
        let x = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, y, z)| (c * 9 + y * 3 + z) as f32);
        let cols = im2col(&x.view(), 1, 1, 0);
        assert_eq!(cols.shape(), &[1, 2, 9]);
        assert_eq!(cols[[0, 1, 4]], x[[0, 1, 1, 1]]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish x, y.
        let (k, s, p, c, h, w) = (3, 2, 1, 2, 6, 6);
        let x = Array4::from_shape_fn((2, c, h, w), |(b, ci, y, z)| {
            ((b * 31 + ci * 17 + y * 7 + z * 3) % 13) as f32 - 6.0
        });
        let oh = conv_out_size(h, k, s, p);
        let y = Array3::from_shape_fn((2, c * k * k, oh * oh), |(b, r, l)| {
            ((b * 23 + r * 5 + l * 11) % 7) as f32 - 3.0
        });
        let cols = im2col(&x.view(), k, s, p);
        let img = col2im(&y.view(), k, s, p, c, h, w);
        let lhs: f32 = (&cols * &y).sum();
        let rhs: f32 = (&x * &img).sum();
        assert!((lhs - rhs).abs() < 1e-3, "adjoint identity violated: {lhs} vs {rhs}");
    }
}
