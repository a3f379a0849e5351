//! Gradient-based attention extraction: backpropagate the discriminator's
//! domain-classification logit through the generated image into captured
//! generator feature maps, pool the gradients per channel, and form the
//! rectified weighted sum A = ReLU(sum_k alpha_k F_k).

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::models::{Discriminator, Generator};
use crate::tensor::{self, backward, Var};
use crate::types::{AttentionMap, DomainVector, ImageBatch, NetworkId};

static EXTRACTIONS: AtomicU64 = AtomicU64::new(0);

/// Number of attention maps extracted by this process so far. Used by
/// training tests to assert exactly one teacher and one student map per
/// generator update.
pub fn extraction_count() -> u64 {
    EXTRACTIONS.load(Ordering::Relaxed)
}

/// Everything needed to extract one attention map.
///
/// `condition` is the label vector handed to the generator; `domain_index`
/// selects the discriminator logit that is backpropagated. They coincide for
/// ordinary distillation and differ in the pseudo-attention setting.
pub struct AttentionRequest<'a> {
    pub source_generator: &'a Generator,
    pub scoring_discriminator: &'a Discriminator,
    pub x: &'a ImageBatch,
    pub condition: &'a DomainVector,
    pub domain_index: usize,
    pub layer_name: &'a str,
    /// With `true` (default) the channel weights are treated as constants so
    /// the map differentiates through the feature maps only; with `false`
    /// the weights stay on the graph (second-order mode).
    pub alpha_detached: bool,
}

impl<'a> AttentionRequest<'a> {
    pub fn new(
        source_generator: &'a Generator,
        scoring_discriminator: &'a Discriminator,
        x: &'a ImageBatch,
        condition: &'a DomainVector,
        domain_index: usize,
        layer_name: &'a str,
    ) -> Self {
        AttentionRequest {
            source_generator,
            scoring_discriminator,
            x,
            condition,
            domain_index,
            layer_name,
            alpha_detached: true,
        }
    }
}

/// Per-channel gradient-pooled weights, shaped (B, n).
#[derive(Clone, Debug)]
pub struct AlphaWeights {
    pub values: Var,
}

/// Pre-sigmoid classification logit of `domain_index` for each sample, (B,).
pub fn class_score(d: &Discriminator, image: &ImageBatch, domain_index: usize) -> Result<Var> {
    let (_, cls) = d.forward(image)?;
    select_logit(&cls.scores, domain_index)
}

/// Select one logit column from (B, n) scores -> (B,).
pub fn select_logit(scores: &Var, domain_index: usize) -> Result<Var> {
    let n = scores.shape()[1];
    if domain_index >= n {
        return Err(Error::DomainIndex { index: domain_index, n_domains: n });
    }
    let col = tensor::slice_axis(scores, 1, domain_index, 1); // (B,1)
    Ok(tensor::reshape(&col, &[scores.shape()[0]]))
}

/// Global average pooling of a feature-map-shaped gradient tensor:
/// alpha[b,k] = mean over (h,w) of grad[b,k,:,:].
pub fn compute_alpha(grad_maps: &Var) -> AlphaWeights {
    let s = grad_maps.shape().to_vec();
    assert_eq!(s.len(), 4, "compute_alpha expects (B,n,h,w), got {s:?}");
    let (b, n, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = tensor::reshape(grad_maps, &[b, n, h * w]);
    let pooled = tensor::mul_scalar(&tensor::sum_axis(&flat, 2), 1.0 / (h * w) as f32);
    AlphaWeights { values: pooled }
}

/// Core of Eq-style attention: differentiate `score_sum` (a single-element
/// Var, the batch-summed class logit) with respect to `features`, pool into
/// channel weights, and return ReLU(sum_k alpha_k F_k) as a (B,h,w) Var.
///
/// The returned map stays differentiable through `features`; with
/// `alpha_detached = false` it is differentiable through the weights too.
pub fn attention_from_parts(
    features: &Var,
    score_sum: &Var,
    alpha_detached: bool,
) -> Result<(Var, AlphaWeights)> {
    let s = features.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!("features must be (B,n,h,w), got {s:?}")));
    }
    let (b, n, h, w) = (s[0], s[1], s[2], s[3]);
    let grads = backward(score_sum, &[features], !alpha_detached);
    let grad = grads
        .get(features)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("score has no gradient path to features".into()))?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("feature-map gradients".into()));
    }
    let alpha = compute_alpha(&grad);
    let alpha_used = if alpha_detached { alpha.values.detach() } else { alpha.values.clone() };
    let a4 = tensor::expand_axis(&tensor::expand_axis(&alpha_used, 2, h), 3, w); // (B,n,h,w)
    let weighted = tensor::sum_axis(&tensor::mul(&a4, features), 1); // (B,h,w)
    let map = tensor::relu(&weighted);
    let _ = (b, n);
    Ok((map, alpha))
}

/// Extract one attention map per Eq-style pipeline: forward the generator
/// capturing the named layer, score the translated image with the
/// discriminator, differentiate the selected logit back into the captured
/// features, and form the rectified weighted sum.
pub fn compute_attention(req: &AttentionRequest) -> Result<AttentionMap> {
    let g = req.source_generator;
    let d = req.scoring_discriminator;
    if req.domain_index >= d.spec.n_domains {
        return Err(Error::DomainIndex { index: req.domain_index, n_domains: d.spec.n_domains });
    }
    let g_leaves = g.bind();
    let (translated, mut caps) =
        g.forward_vars(&g_leaves, req.x.var(), req.condition.var(), &[req.layer_name])?;
    let features = caps
        .remove(req.layer_name)
        .ok_or_else(|| Error::UnknownLayer {
            name: req.layer_name.to_string(),
            available: g.registry().to_vec(),
        })?;
    let d_leaves = d.bind();
    let (_, cls) = d.forward_vars(&d_leaves, &translated)?;
    let y = select_logit(&cls, req.domain_index)?;
    let y_sum = tensor::sum_all(&y);
    let (map, _) = attention_from_parts(&features, &y_sum, req.alpha_detached)
        .map_err(|e| wrap_layer_error(e, req.layer_name))?;
    if !map.is_finite() {
        return Err(Error::NonFinite(format!("attention map at layer `{}`", req.layer_name)));
    }
    EXTRACTIONS.fetch_add(1, Ordering::Relaxed);
    AttentionMap::new(map, req.domain_index, req.layer_name, g.spec.role)
}

fn wrap_layer_error(e: Error, layer: &str) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at layer `{layer}`")),
        other => other,
    }
}

/// Batch convenience over [`compute_attention`]: one extraction per layer.
pub fn attention_for_layers(
    req: &AttentionRequest,
    layers: &[&str],
) -> Result<Vec<AttentionMap>> {
    layers
        .iter()
        .map(|layer| {
            let sub = AttentionRequest { layer_name: layer, ..*req };
            compute_attention(&sub)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        build_discriminator, build_generator, ChannelScale, DiscriminatorSpec, GeneratorSpec,
        LAST_RESBLOCK_CONV,
    };
    use crate::types::RandomSeed;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arr(shape: &[usize], data: Vec<f32>) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn alpha_of_constant_gradient_is_the_constant() {
        let g = Var::constant(ArrayD::from_elem(IxDyn(&[2, 3, 4, 4]), 0.5));
        let alpha = compute_alpha(&g);
        assert_eq!(alpha.values.shape(), &[2, 3]);
        assert!(alpha.values.value().iter().all(|v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn alpha_is_the_spatial_mean() {
        let g = Var::constant(arr(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]));
        let alpha = compute_alpha(&g);
        assert!((alpha.values.item() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn alpha_matches_scalar_loop_oracle() {
        let g = randn(&[2, 3, 4, 4], 5);
        let alpha = compute_alpha(&Var::constant(g.clone()));
        let av = alpha.values.to_array();
        for b in 0..2 {
            for k in 0..3 {
                let mut acc = 0.0f64;
                for m in 0..4 {
                    for n in 0..4 {
                        acc += g[[b, k, m, n]] as f64;
                    }
                }
                let want = (acc / 16.0) as f32;
                let got = av[[b, k]];
                assert!((got - want).abs() < 1e-6, "alpha[{b},{k}]: {got} vs {want}");
            }
        }
    }

    #[test]
    fn alpha_is_linear() {
        let g1 = randn(&[1, 2, 3, 3], 7);
        let g2 = randn(&[1, 2, 3, 3], 8);
        let combo = 2.5f32 * &g1 + (-1.25f32) * &g2;
        let a_combo = compute_alpha(&Var::constant(combo)).values.to_array();
        let a1 = compute_alpha(&Var::constant(g1)).values.to_array();
        let a2 = compute_alpha(&Var::constant(g2)).values.to_array();
        let want = 2.5f32 * &a1 + (-1.25f32) * &a2;
        for (g, w) in a_combo.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-5, "{g} vs {w}");
        }
    }

    /// Hand-built toy: features F are leaf inputs, the "discriminator" is a
    /// fixed linear functional y = <w, F>. Then dy/dF = w, alpha = mean(w)
    /// per channel, and A = ReLU(sum_k alpha_k F_k) in closed form.
    #[test]
    fn toy_linear_scorer_matches_closed_form() {
        let f_data = arr(&[1, 2, 2, 2], vec![1.0, -2.0, 3.0, 4.0, 0.5, 0.25, -1.0, 2.0]);
        let w_data = arr(&[1, 2, 2, 2], vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.5, 1.0, -1.0]);
        let f = Var::param(f_data.clone());
        let w = Var::constant(w_data.clone());
        let y = tensor::sum_all(&tensor::mul(&f, &w));
        let (map, alpha) = attention_from_parts(&f, &y, true).unwrap();

        // closed form
        let a0 = (0.1 + 0.2 + 0.3 + 0.4) / 4.0;
        let a1 = (-0.5 + 0.5 + 1.0 - 1.0) / 4.0;
        let av = alpha.values.to_array();
        assert!((av[[0, 0]] - a0).abs() < 1e-6);
        assert!((av[[0, 1]] - a1).abs() < 1e-6);
        let mv = map.to_array();
        for m in 0..2 {
            for n in 0..2 {
                let pre = a0 * f_data[[0, 0, m, n]] + a1 * f_data[[0, 1, m, n]];
                let want = pre.max(0.0);
                let got = mv[[0, m, n]];
                assert!((got - want).abs() < 1e-6, "A[{m},{n}]: {got} vs {want}");
            }
        }
    }

    /// f64 scalar-loop forward of the two-layer toy network (conv, tanh,
    /// conv, mean). Independent of the autodiff engine; precise enough for
    /// 1e-3 central differences.
    fn toy_forward_f64(f: &ArrayD<f32>, w1: &ArrayD<f32>, w2: &ArrayD<f32>) -> f64 {
        let (b, c, hh, ww) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
        let oc1 = w1.shape()[0];
        let mut h = vec![0.0f64; b * oc1 * hh * ww];
        for bi in 0..b {
            for o in 0..oc1 {
                for y in 0..hh {
                    for x in 0..ww {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = y as isize + ky as isize - 1;
                                    let ix = x as isize + kx as isize - 1;
                                    if iy < 0 || iy >= hh as isize || ix < 0 || ix >= ww as isize {
                                        continue;
                                    }
                                    acc += f[[bi, ci, iy as usize, ix as usize]] as f64
                                        * w1[[o, ci, ky, kx]] as f64;
                                }
                            }
                        }
                        h[((bi * oc1 + o) * hh + y) * ww + x] = acc.tanh();
                    }
                }
            }
        }
        let mut total = 0.0f64;
        for bi in 0..b {
            for y in 0..hh {
                for x in 0..ww {
                    let mut acc = 0.0f64;
                    for ci in 0..oc1 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = x as isize + kx as isize - 1;
                                if iy < 0 || iy >= hh as isize || ix < 0 || ix >= ww as isize {
                                    continue;
                                }
                                acc += h[((bi * oc1 + ci) * hh + iy as usize) * ww + ix as usize]
                                    * w2[[0, ci, ky, kx]] as f64;
                            }
                        }
                    }
                    total += acc;
                }
            }
        }
        total / (b * hh * ww) as f64
    }

    /// Two-layer toy network: analytic dy/dF vs central finite differences on
    /// 64 sampled entries with step 1e-3, relative error < 1e-2. The numeric
    /// side runs through the f64 scalar-loop oracle so the comparison is not
    /// drowned by f32 evaluation noise.
    #[test]
    fn feature_gradient_matches_finite_differences() {
        let f0 = randn(&[2, 3, 6, 6], 11);
        let w1d = randn(&[4, 3, 3, 3], 12).mapv(|v| v * 0.5);
        let w2d = randn(&[1, 4, 3, 3], 13).mapv(|v| v * 0.5);
        let w1 = Var::constant(w1d.clone());
        let w2 = Var::constant(w2d.clone());
        let f = Var::param(f0.clone());
        let h = tensor::tanh(&crate::tensor::nn::conv2d(&f, &w1, None, 1, 1));
        let y = tensor::mean_all(&crate::tensor::nn::conv2d(&h, &w2, None, 1, 1));
        // the f32 engine agrees with the f64 oracle on the value itself
        assert!((y.item() as f64 - toy_forward_f64(&f0, &w1d, &w2d)).abs() < 1e-4);
        let analytic = backward(&y, &[&f], false).grad(&f).to_array();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = f0.len();
        let mut worst = 0.0f64;
        for _ in 0..64 {
            let flat = rng.random_range(0..n);
            let eval = |delta: f32| {
                let mut p = f0.clone();
                p.as_slice_mut().unwrap()[flat] += delta;
                toy_forward_f64(&p, &w1d, &w2d)
            };
            let numeric = (eval(1e-3) - eval(-1e-3)) / 2e-3;
            let a = analytic.as_slice().unwrap()[flat] as f64;
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((a - numeric).abs() / denom);
        }
        assert!(worst < 1e-2, "finite-difference relative error {worst}");
    }

    fn fixture() -> (Generator, Discriminator, ImageBatch, DomainVector) {
        let gspec = GeneratorSpec {
            base_channels: 8,
            n_resblocks: 2,
            n_domains: 4,
            image_size: 32,
            scale: ChannelScale::ONE,
            role: NetworkId::Teacher,
        };
        let dspec =
            DiscriminatorSpec { base_channels: 8, n_layers: 5, n_domains: 4, image_size: 32 };
        let g = build_generator(&gspec, RandomSeed(1)).unwrap();
        let d = build_discriminator(&dspec, RandomSeed(2)).unwrap();
        let x = ImageBatch::new(randn(&[2, 3, 32, 32], 3).mapv(|v| v * 0.9)).unwrap();
        let c = DomainVector::one_hot(2, 4, 1).unwrap();
        (g, d, x, c)
    }

    #[test]
    fn attention_maps_are_non_negative() {
        let (g, d, x, c) = fixture();
        let req = AttentionRequest::new(&g, &d, &x, &c, 1, LAST_RESBLOCK_CONV);
        let map = compute_attention(&req).unwrap();
        assert_eq!(map.data.shape(), &[2, 8, 8]);
        assert!(map.data.value().iter().all(|v| *v >= 0.0));
        assert_eq!(map.network_id, NetworkId::Teacher);
    }

    #[test]
    fn extraction_does_not_mutate_parameters() {
        let (g, d, x, c) = fixture();
        let gh = g.store().content_hash();
        let dh = d.store().content_hash();
        let req = AttentionRequest::new(&g, &d, &x, &c, 2, LAST_RESBLOCK_CONV);
        let _ = compute_attention(&req).unwrap();
        assert_eq!(g.store().content_hash(), gh);
        assert_eq!(d.store().content_hash(), dh);
    }

    #[test]
    fn per_layer_batch_matches_single_extraction() {
        let (g, d, x, c) = fixture();
        let req = AttentionRequest::new(&g, &d, &x, &c, 0, LAST_RESBLOCK_CONV);
        let single = compute_attention(&req).unwrap();
        let maps =
            attention_for_layers(&req, &[LAST_RESBLOCK_CONV, "resblock1", LAST_RESBLOCK_CONV])
                .unwrap();
        assert_eq!(maps.len(), 3);
        assert_eq!(maps[0].data.to_array(), single.data.to_array());
        assert_eq!(maps[0].data.to_array(), maps[2].data.to_array(), "duplicate layer, equal maps");
        // same downsampling depth: resblocks share spatial dims
        assert_eq!(maps[1].spatial(), maps[0].spatial());
    }

    #[test]
    fn teacher_and_student_maps_share_spatial_dims() {
        let (g, d, x, c) = fixture();
        let sspec = GeneratorSpec {
            base_channels: 8,
            n_resblocks: 1,
            n_domains: 4,
            image_size: 32,
            scale: ChannelScale::HALF,
            role: NetworkId::Student,
        };
        let s = build_generator(&sspec, RandomSeed(9)).unwrap();
        let t_map =
            compute_attention(&AttentionRequest::new(&g, &d, &x, &c, 1, LAST_RESBLOCK_CONV))
                .unwrap();
        let s_map =
            compute_attention(&AttentionRequest::new(&s, &d, &x, &c, 1, LAST_RESBLOCK_CONV))
                .unwrap();
        assert_eq!(t_map.spatial(), s_map.spatial());
        assert_eq!(s_map.network_id, NetworkId::Student);
    }

    #[test]
    fn domain_index_out_of_range_rejected() {
        let (g, d, x, c) = fixture();
        let req = AttentionRequest::new(&g, &d, &x, &c, 9, LAST_RESBLOCK_CONV);
        assert!(matches!(compute_attention(&req), Err(Error::DomainIndex { .. })));
    }

    #[test]
    fn identical_batch_rows_get_identical_scores() {
        let (_, d, _, _) = fixture();
        let row = randn(&[1, 3, 32, 32], 21).mapv(|v| v * 0.8);
        let mut dup = ArrayD::<f32>::zeros(IxDyn(&[2, 3, 32, 32]));
        dup.index_axis_mut(ndarray::Axis(0), 0).assign(&row.index_axis(ndarray::Axis(0), 0));
        dup.index_axis_mut(ndarray::Axis(0), 1).assign(&row.index_axis(ndarray::Axis(0), 0));
        let scores = class_score(&d, &ImageBatch::new(dup).unwrap(), 0).unwrap();
        let v = scores.to_array();
        assert!(v[[0]].is_finite());
        assert_eq!(v[[0]], v[[1]]);
    }
}
