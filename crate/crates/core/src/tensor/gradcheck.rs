//! Finite-difference gradient checking against the analytic backward pass.
//!
//! Used by tests and the acceptance suite; kept in the library so multiple
//! test targets can share it.

use ndarray::ArrayD;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    /// Worst |analytic - numeric| / (atol + rtol * max(|analytic|, |numeric|)).
    /// A value <= 1 means every checked entry passed the tolerance.
    pub worst_ratio: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOpts {
    pub eps: f32,
    pub samples: usize,
    pub seed: u64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts { eps: 1e-2, samples: 24, seed: 0, rtol: 1e-2, atol: 1e-3 }
    }
}

/// Compare analytic gradients of `f` (a scalar function of leaf params)
/// against central finite differences at up to `samples` randomly chosen
/// entries per input.
pub fn check_scalar_fn(
    f: &dyn Fn(&[Var]) -> Var,
    inputs: &[ArrayD<f32>],
    opts: GradCheckOpts,
) -> GradCheckReport {
    let leaves: Vec<Var> = inputs.iter().map(|a| Var::param(a.clone())).collect();
    let out = f(&leaves);
    assert_eq!(out.len(), 1, "gradcheck target must be scalar");
    let leaf_refs: Vec<&Var> = leaves.iter().collect();
    let grads = backward(&out, &leaf_refs, false);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_abs_err: 0.0, worst_ratio: 0.0, checked: 0 };

    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.grad(&leaves[which]).to_array();
        let n = input.len();
        let picks: Vec<usize> = if n <= opts.samples {
            (0..n).collect()
        } else {
            (0..opts.samples).map(|_| rng.random_range(0..n)).collect()
        };
        for flat in picks {
            let numeric = central_diff(f, inputs, which, flat, opts.eps);
            let a = analytic.as_slice().expect("standard layout")[flat] as f64;
            let abs = (a - numeric).abs();
            let ratio = abs / (opts.atol + opts.rtol * a.abs().max(numeric.abs()));
            report.max_abs_err = report.max_abs_err.max(abs);
            report.worst_ratio = report.worst_ratio.max(ratio);
            report.checked += 1;
        }
    }
    report
}

/// Central difference d f / d inputs[which][flat].
pub fn central_diff(
    f: &dyn Fn(&[Var]) -> Var,
    inputs: &[ArrayD<f32>],
    which: usize,
    flat: usize,
    eps: f32,
) -> f64 {
    // Leaves stay trainable params: `f` may internally call `backward`
    // (gradient-penalty style), which needs the graph recorded.
    let eval = |delta: f32| -> f64 {
        let mut perturbed: Vec<ArrayD<f32>> = inputs.to_vec();
        perturbed[which].as_slice_mut().expect("standard layout")[flat] += delta;
        let leaves: Vec<Var> = perturbed.iter().map(|a| Var::param(a.clone())).collect();
        f(&leaves).item() as f64
    };
    (eval(eps) - eval(-eps)) / (2.0 * eps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{self, nn};
    use ndarray::IxDyn;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn elementwise_chain_gradcheck() {
        let f = |vars: &[Var]| {
            let a = &vars[0];
            let b = &vars[1];
            let t = tensor::tanh(&tensor::mul(a, b));
            let s = tensor::sigmoid(&tensor::sub(a, b));
            tensor::mean_all(&tensor::add(&tensor::square(&t), &s))
        };
        let report = check_scalar_fn(
            &f,
            &[randn(&[3, 4], 1), randn(&[3, 4], 2)],
            GradCheckOpts { samples: 24, seed: 99, ..Default::default() },
        );
        assert!(report.worst_ratio <= 1.0, "gradcheck ratio {}", report.worst_ratio);
    }

    #[test]
    fn conv_stack_gradcheck() {
        let f = |vars: &[Var]| {
            let x = &vars[0];
            let w1 = &vars[1];
            let w2 = &vars[2];
            let h = tensor::leaky_relu(&nn::conv2d(x, w1, None, 2, 1), 0.01);
            let out = nn::conv2d(&h, w2, None, 1, 1);
            tensor::mean_all(&tensor::square(&out))
        };
        let inputs =
            [randn(&[2, 3, 8, 8], 3), randn(&[4, 3, 4, 4], 4), randn(&[2, 4, 3, 3], 5)];
        let report = check_scalar_fn(
            &f,
            &inputs,
            GradCheckOpts { samples: 20, seed: 7, ..Default::default() },
        );
        assert!(report.worst_ratio <= 1.0, "gradcheck ratio {}", report.worst_ratio);
    }

    #[test]
    fn conv_transpose_instance_norm_gradcheck() {
        let f = |vars: &[Var]| {
            let x = &vars[0];
            let w = &vars[1];
            let g = &vars[2];
            let b = &vars[3];
            let h = nn::conv_transpose2d(x, w, None, 2, 1);
            let h = nn::instance_norm(&h, g, b, 1e-5);
            tensor::mean_all(&tensor::square(&tensor::tanh(&h)))
        };
        let inputs = [
            randn(&[2, 4, 4, 4], 11),
            randn(&[4, 3, 4, 4], 12),
            randn(&[3], 13),
            randn(&[3], 14),
        ];
        let report = check_scalar_fn(
            &f,
            &inputs,
            GradCheckOpts { samples: 16, seed: 21, ..Default::default() },
        );
        assert!(report.worst_ratio <= 1.0, "gradcheck ratio {}", report.worst_ratio);
    }

    #[test]
    fn second_order_gradient_penalty_style_check() {
        // d/dx of ||grad_x f||^2 for f = sum(tanh(conv(x,w))) via create_graph,
        // compared against finite differences of the first-order gradient norm.
        let x0 = randn(&[1, 2, 5, 5], 31);
        let w0 = randn(&[2, 2, 3, 3], 32);
        let penalty = |vars: &[Var]| {
            let x = &vars[0];
            let w = Var::constant(w0.clone());
            let y = tensor::sum_all(&tensor::tanh(&nn::conv2d(x, &w, None, 1, 1)));
            let g = backward(&y, &[x], true).grad(x);
            tensor::sum_all(&tensor::square(&g))
        };
        let report = check_scalar_fn(
            &penalty,
            &[x0],
            GradCheckOpts { samples: 16, seed: 41, eps: 2e-2, ..Default::default() },
        );
        assert!(report.worst_ratio <= 1.0, "double-backward ratio {}", report.worst_ratio);
    }
}
