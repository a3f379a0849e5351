//! Neural-net building blocks composed from the autodiff primitives:
//! convolutions (via im2col + GEMM), transposed convolutions, instance
//! normalization and fully-connected layers, plus weight initializers.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    add, add_scalar, col2im, div, expand_axis, gemm, gemm2d, im2col, mul, mul_scalar, reshape,
    sqrt, square, sum_axis, transpose2, Var,
};
use super::kernels::{conv_out_size, conv_transpose_out_size};

/// 2-D convolution. `x` is (B, IC, H, W); `w` is (OC, IC, k, k).
pub fn conv2d(x: &Var, w: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
    let (b, ic, h, wdt) = dims4(x);
    let ws = w.shape();
    assert_eq!(ws[1], ic, "conv2d: in-channel mismatch {:?} vs input {:?}", ws, x.shape());
    let (oc, k) = (ws[0], ws[2]);
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(wdt, k, stride, pad);
    let cols = im2col(x, k, stride, pad); // (B, IC*k*k, OH*OW)
    let wm = reshape(w, &[oc, ic * k * k]);
    let out = gemm(&wm, &cols); // (B, OC, OH*OW)
    let out = reshape(&out, &[b, oc, oh, ow]);
    match bias {
        Some(bv) => add(&out, &tile_channels(bv, b, oh, ow)),
        None => out,
    }
}

/// 2-D transposed convolution. `x` is (B, IC, H, W); `w` is (IC, OC, k, k).
pub fn conv_transpose2d(x: &Var, w: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
    let (b, ic, h, wdt) = dims4(x);
    let ws = w.shape();
    assert_eq!(ws[0], ic, "conv_transpose2d: in-channel mismatch");
    let (oc, k) = (ws[1], ws[2]);
    let oh = conv_transpose_out_size(h, k, stride, pad);
    let ow = conv_transpose_out_size(wdt, k, stride, pad);
    let wm = reshape(w, &[ic, oc * k * k]);
    let wt = transpose2(&wm); // (OC*k*k, IC)
    let x_flat = reshape(x, &[b, ic, h * wdt]);
    let cols = gemm(&wt, &x_flat); // (B, OC*k*k, H*W)
    let out = col2im(&cols, k, stride, pad, oc, oh, ow);
    match bias {
        Some(bv) => add(&out, &tile_channels(bv, b, oh, ow)),
        None => out,
    }
}

/// Instance normalization with per-channel affine parameters.
pub fn instance_norm(x: &Var, gamma: &Var, beta: &Var, eps: f32) -> Var {
    let (b, c, h, w) = dims4(x);
    let l = h * w;
    let xf = reshape(x, &[b, c, l]);
    let mean = mul_scalar(&sum_axis(&xf, 2), 1.0 / l as f32); // (B,C)
    let mean = expand_axis(&mean, 2, l);
    let centered = super::sub(&xf, &mean);
    let var = mul_scalar(&sum_axis(&square(&centered), 2), 1.0 / l as f32);
    let std = sqrt(&add_scalar(&var, eps));
    let std = expand_axis(&std, 2, l);
    let xh = div(&centered, &std);
    let g = expand_axis(&expand_axis(gamma, 0, b), 2, l); // (B,C,L)
    let bta = expand_axis(&expand_axis(beta, 0, b), 2, l);
    reshape(&add(&mul(&xh, &g), &bta), &[b, c, h, w])
}

/// Fully connected layer. `x` is (B, K); `w` is (N, K); bias (N).
pub fn linear(x: &Var, w: &Var, bias: Option<&Var>) -> Var {
    let b = x.shape()[0];
    let out = gemm2d(x, &transpose2(w));
    match bias {
        Some(bv) => add(&out, &expand_axis(bv, 0, b)),
        None => out,
    }
}

/// Spatial mean over H and W: (B, C, H, W) -> (B, C).
pub fn global_avg_pool(x: &Var) -> Var {
    let (b, c, h, w) = dims4(x);
    let xf = reshape(x, &[b, c, h * w]);
    mul_scalar(&sum_axis(&xf, 2), 1.0 / (h * w) as f32)
}

fn tile_channels(bias: &Var, b: usize, h: usize, w: usize) -> Var {
    // (C,) -> (B, C, H, W)
    let bc = expand_axis(bias, 0, b);
    let bch = expand_axis(&bc, 2, h);
    expand_axis(&bch, 3, w)
}

pub fn dims4(x: &Var) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

/// He-style normal init, std = sqrt(2 / fan_in).
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::ones(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn conv2d_matches_direct_loop() {
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 5, 5]), |ix| {
            (ix[0] as f32 * 1.3 + ix[1] as f32 * 0.7 + ix[2] as f32 - ix[3] as f32 * 0.5).sin()
        });
        let w = ArrayD::from_shape_fn(IxDyn(&[4, 3, 3, 3]), |ix| {
            (ix[0] as f32 - ix[1] as f32 * 0.2 + ix[2] as f32 * 0.9 + ix[3] as f32).cos() * 0.1
        });
        let out = conv2d(&Var::constant(x.clone()), &Var::constant(w.clone()), None, 2, 1);
        assert_eq!(out.shape(), &[2, 4, 3, 3]);
        // scalar-loop oracle
        let ov = out.to_array();
        for bi in 0..2 {
            for oc in 0..4 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = 0.0f32;
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ixx = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || iy >= 5 || ixx < 0 || ixx >= 5 {
                                        continue;
                                    }
                                    acc += x[[bi, ci, iy as usize, ixx as usize]]
                                        * w[[oc, ci, ky, kx]];
                                }
                            }
                        }
                        let got = ov[[bi, oc, oy, ox]];
                        assert!((got - acc).abs() < 1e-4, "({bi},{oc},{oy},{ox}): {got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_transpose_shape() {
        let x = Var::constant(ArrayD::zeros(IxDyn(&[1, 4, 8, 8])));
        let w = Var::constant(ArrayD::zeros(IxDyn(&[4, 2, 4, 4])));
        let out = conv_transpose2d(&x, &w, None, 2, 1);
        assert_eq!(out.shape(), &[1, 2, 16, 16]);
    }

    #[test]
    fn instance_norm_zero_mean_unit_std() {
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |ix| {
            (ix[0] * 100 + ix[1] * 31 + ix[2] * 7 + ix[3]) as f32 * 0.11 - 2.0
        });
        let g = Var::constant(ones(&[3]));
        let b = Var::constant(zeros(&[3]));
        let out = instance_norm(&Var::constant(x), &g, &b, 1e-5);
        let ov = out.to_array();
        for bi in 0..2 {
            for ci in 0..3 {
                let ch = ov.slice(ndarray::s![bi, ci, .., ..]);
                let mean: f32 = ch.iter().sum::<f32>() / 16.0;
                let var: f32 = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 16.0;
                assert!(mean.abs() < 1e-4, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-2, "var {var}");
            }
        }
    }
}
