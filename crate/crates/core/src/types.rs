//! Shared domain types: image batches, domain label vectors, captured feature
//! maps, attention maps, and the deterministic seeding contract.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Var};

/// Guard used by every normalization in the crate.
pub const EPS: f32 = 1e-8;

/// Batch of RGB images shaped (B, 3, H, W) with values in [-1, 1].
#[derive(Clone, Debug)]
pub struct ImageBatch {
    data: Var,
}

impl ImageBatch {
    pub fn new(data: ArrayD<f32>) -> Result<Self> {
        Self::from_var(Var::constant(data))
    }

    /// Wrap an existing graph value (e.g. a generator output) as an image batch.
    pub fn from_var(data: Var) -> Result<Self> {
        let s = data.shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::ShapeMismatch(format!("image batch must be (B,3,H,W), got {s:?}")));
        }
        if s[0] < 1 {
            return Err(Error::InvalidArgument("image batch needs B >= 1".into()));
        }
        let (h, w) = (s[2], s[3]);
        if h != w || h < 32 || !h.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "image side must be a power of two >= 32 and square, got {h}x{w}"
            )));
        }
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for v in data.value().iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("image batch".into()));
            }
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if lo < -1.0 || hi > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "image values must lie in [-1,1], got [{lo}, {hi}]"
            )));
        }
        Ok(ImageBatch { data })
    }

    pub fn var(&self) -> &Var {
        &self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Binary target-domain labels shaped (B, n_domains).
#[derive(Clone, Debug)]
pub struct DomainVector {
    labels: Var,
}

impl DomainVector {
    pub fn new(labels: ArrayD<f32>) -> Result<Self> {
        let s = labels.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("domain vector must be (B,n), got {s:?}")));
        }
        if s[1] < 2 {
            return Err(Error::InvalidArgument("need n_domains >= 2".into()));
        }
        if labels.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::InvalidArgument("domain labels must be exactly 0 or 1".into()));
        }
        Ok(DomainVector { labels: Var::constant(labels) })
    }

    /// One-hot batch: every row selects `index` out of `n_domains`.
    pub fn one_hot(batch: usize, n_domains: usize, index: usize) -> Result<Self> {
        if index >= n_domains {
            return Err(Error::DomainIndex { index, n_domains });
        }
        let mut arr = ArrayD::<f32>::zeros(IxDyn(&[batch, n_domains]));
        for b in 0..batch {
            arr[[b, index]] = 1.0;
        }
        DomainVector::new(arr)
    }

    pub fn var(&self) -> &Var {
        &self.labels
    }

    pub fn n_domains(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn batch_size(&self) -> usize {
        self.labels.shape()[0]
    }
}

/// Activations captured at a named generator layer, shaped (B, n, h, w).
/// The wrapped value stays on the differentiation graph.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub data: Var,
    pub layer_name: String,
}

impl FeatureMaps {
    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.data.shape();
        (s[2], s[3])
    }
}

/// Which network produced an attention map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkId {
    Teacher,
    Student,
}

impl std::fmt::Display for NetworkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NetworkId::Teacher => write!(f, "teacher"),
            NetworkId::Student => write!(f, "student"),
        }
    }
}

/// Non-negative gradient-weighted attention map shaped (B, h, w).
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub data: Var,
    pub domain_index: usize,
    pub layer_name: String,
    pub network_id: NetworkId,
}

impl AttentionMap {
    /// Validates non-negativity and finiteness of an externally built map.
    pub fn new(
        data: Var,
        domain_index: usize,
        layer_name: impl Into<String>,
        network_id: NetworkId,
    ) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "attention map must be (B,h,w), got {:?}",
                data.shape()
            )));
        }
        for v in data.value().iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("attention map".into()));
            }
            if *v < 0.0 {
                return Err(Error::InvalidArgument("attention map has negative entries".into()));
            }
        }
        Ok(AttentionMap { data, domain_index, layer_name: layer_name.into(), network_id })
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.data.shape();
        (s[1], s[2])
    }
}

/// Pre-sigmoid discriminator domain-classification logits, (B, n_domains).
#[derive(Clone, Debug)]
pub struct ClassScore {
    pub scores: Var,
}

impl ClassScore {
    pub fn n_domains(&self) -> usize {
        self.scores.shape()[1]
    }
}

/// Seed for every stochastic operation in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomSeed(pub u64);

static GLOBAL_SEED: AtomicU64 = AtomicU64::new(0);

impl RandomSeed {
    /// The seed most recently installed by [`seed_all`].
    pub fn global() -> RandomSeed {
        RandomSeed(GLOBAL_SEED.load(Ordering::SeqCst))
    }
}

/// Install a process-global default seed. Entry points still take explicit
/// seeds; this only backs [`RandomSeed::global`]. Call before spawning any
/// parallel work.
pub fn seed_all(seed: RandomSeed) {
    GLOBAL_SEED.store(seed.0, Ordering::SeqCst);
}

/// FNV-1a over the seed and a label, used to derive independent named
/// substreams from one seed. Stable across platforms and releases.
fn mix_label(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in seed.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic named RNG substream of a seed.
pub fn rng_stream(seed: RandomSeed, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_label(seed.0, label))
}

/// How an attention map is rescaled before comparison or rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    /// Per-sample (a - min) / (max - min + EPS): all-zero maps stay all-zero.
    #[default]
    Minmax,
    /// Per-sample division by the Euclidean norm + EPS.
    L2,
    /// Identity.
    None,
}

/// Distance used inside the distillation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-sample mean absolute difference.
    #[default]
    L1,
    /// Per-sample Euclidean distance.
    L2,
}

/// Normalize a (B, h, w) map per sample. Stays on the graph so the student
/// side of the distillation loss differentiates through it.
pub fn normalize_map_var(data: &Var, mode: NormalizeMode) -> Var {
    let s = data.shape().to_vec();
    assert_eq!(s.len(), 3, "normalize_map expects (B,h,w)");
    let (b, h, w) = (s[0], s[1], s[2]);
    let l = h * w;
    match mode {
        NormalizeMode::None => data.clone(),
        NormalizeMode::Minmax => {
            let flat = tensor::reshape(data, &[b, l]);
            let mn = tensor::expand_axis(&tensor::min_axis(&flat, 1), 1, l);
            let mx = tensor::expand_axis(&tensor::max_axis(&flat, 1), 1, l);
            let range = tensor::add_scalar(&tensor::sub(&mx, &mn), EPS);
            let scaled = tensor::div(&tensor::sub(&flat, &mn), &range);
            tensor::reshape(&scaled, &[b, h, w])
        }
        NormalizeMode::L2 => {
            let flat = tensor::reshape(data, &[b, l]);
            let norm = tensor::sqrt(&tensor::sum_axis(&tensor::square(&flat), 1));
            let denom = tensor::expand_axis(&tensor::add_scalar(&norm, EPS), 1, l);
            tensor::reshape(&tensor::div(&flat, &denom), &[b, h, w])
        }
    }
}

/// Rescale an attention map per sample; non-negativity is preserved.
pub fn normalize_map(map: &AttentionMap, mode: NormalizeMode) -> AttentionMap {
    AttentionMap {
        data: normalize_map_var(&map.data, mode),
        domain_index: map.domain_index,
        layer_name: map.layer_name.clone(),
        network_id: map.network_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn map_of(shape: &[usize], data: Vec<f32>) -> AttentionMap {
        AttentionMap::new(
            Var::constant(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()),
            0,
            "last_resblock_conv",
            NetworkId::Teacher,
        )
        .unwrap()
    }

    #[test]
    fn minmax_of_all_zero_map_is_all_zero() {
        let m = map_of(&[1, 4, 4], vec![0.0; 16]);
        let n = normalize_map(&m, NormalizeMode::Minmax);
        assert!(n.data.value().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn minmax_rescales_affinely() {
        let m = map_of(&[1, 2, 2], vec![0.0, 2.0, 4.0, 8.0]);
        let n = normalize_map(&m, NormalizeMode::Minmax);
        let want = [0.0, 0.25, 0.5, 1.0];
        for (got, w) in n.data.value().iter().zip(want.iter()) {
            assert!((got - w).abs() < 1e-6, "{got} vs {w}");
        }
    }

    #[test]
    fn l2_normalizes_three_four_five() {
        let m = map_of(&[1, 1, 2], vec![3.0, 4.0]);
        let n = normalize_map(&m, NormalizeMode::L2);
        let got: Vec<f32> = n.data.value().iter().copied().collect();
        assert!((got[0] - 0.6).abs() < 1e-6 && (got[1] - 0.8).abs() < 1e-6, "{got:?}");
    }

    #[test]
    fn minmax_idempotent_on_unit_span() {
        let m = map_of(&[1, 2, 2], vec![0.0, 0.25, 0.75, 1.0]);
        let once = normalize_map(&m, NormalizeMode::Minmax);
        let twice = normalize_map(&once, NormalizeMode::Minmax);
        assert_eq!(once.data.to_array(), twice.data.to_array());
    }

    #[test]
    fn per_sample_normalization_is_independent() {
        let m = map_of(&[2, 1, 2], vec![0.0, 2.0, 0.0, 100.0]);
        let n = normalize_map(&m, NormalizeMode::Minmax);
        let v = n.data.to_array();
        assert!((v[[0, 0, 1]] - 1.0).abs() < 1e-6);
        assert!((v[[1, 0, 1]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn domain_vector_rejects_non_binary() {
        let arr = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.5, 1.0]).unwrap();
        assert!(DomainVector::new(arr).is_err());
    }

    #[test]
    fn image_batch_rejects_out_of_range() {
        let mut arr = ArrayD::<f32>::zeros(IxDyn(&[1, 3, 32, 32]));
        arr[[0, 0, 0, 0]] = 1.5;
        assert!(ImageBatch::new(arr).is_err());
    }

    #[test]
    fn seed_all_sets_global() {
        seed_all(RandomSeed(42));
        assert_eq!(RandomSeed::global(), RandomSeed(42));
    }

    #[test]
    fn rng_streams_differ_by_label_and_seed() {
        use rand::Rng;
        let a: u64 = rng_stream(RandomSeed(0), "init").random();
        let b: u64 = rng_stream(RandomSeed(0), "data").random();
        let c: u64 = rng_stream(RandomSeed(1), "init").random();
        let a2: u64 = rng_stream(RandomSeed(0), "init").random();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
