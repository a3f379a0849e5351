//! Teacher, student and S-Lite generators plus the shared discriminator,
//! built from declarative specs with deterministic seeded initialization and
//! named-layer activation capture.
//!
//! Generator topology: 7x7 stride-1 input conv over the image concatenated
//! with the spatially tiled label vector, two 4x4 stride-2 downsampling
//! convs doubling channels, a run of residual blocks, two 4x4 stride-2
//! transposed convs halving channels, and a 7x7 conv to RGB with a tanh
//! head. Hidden blocks use instance norm + ReLU. The discriminator stacks
//! 4x4 stride-2 convs with leaky-ReLU (slope 0.01, no normalization) and
//! ends in a 3x3 patch head plus a full-receptive-field classification head.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArcArray, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::nn::{self, conv2d, conv_transpose2d, instance_norm};
use crate::tensor::{self, Var};
use crate::types::{
    rng_stream, ClassScore, DomainVector, FeatureMaps, ImageBatch, NetworkId, RandomSeed,
};

pub const INSTANCE_NORM_EPS: f32 = 1e-5;
pub const LEAKY_SLOPE: f32 = 0.01;

/// Name under which the final residual block's last convolution output is
/// always registered.
pub const LAST_RESBLOCK_CONV: &str = "last_resblock_conv";

/// Rational channel-width multiplier (teacher 1, student 1/2, s_lite 1/4).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelScale {
    pub num: u32,
    pub den: u32,
}

impl ChannelScale {
    pub const ONE: ChannelScale = ChannelScale { num: 1, den: 1 };
    pub const HALF: ChannelScale = ChannelScale { num: 1, den: 2 };
    pub const QUARTER: ChannelScale = ChannelScale { num: 1, den: 4 };

    pub fn apply(&self, base: usize) -> Result<usize> {
        if self.den == 0 {
            return Err(Error::InvalidSpec("channel scale denominator is zero".into()));
        }
        let scaled = base * self.num as usize;
        if scaled % self.den as usize != 0 {
            return Err(Error::InvalidSpec(format!(
                "scaled channel count {base} * {}/{} is not integral",
                self.num, self.den
            )));
        }
        Ok(scaled / self.den as usize)
    }
}

/// Declarative generator description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub base_channels: usize,
    pub n_resblocks: usize,
    pub n_domains: usize,
    pub image_size: usize,
    pub scale: ChannelScale,
    #[serde(default = "default_role")]
    pub role: NetworkId,
}

fn default_role() -> NetworkId {
    NetworkId::Student
}

impl GeneratorSpec {
    /// Full-scale teacher: 64 base channels, 6 residual blocks.
    pub fn teacher(n_domains: usize, image_size: usize) -> Self {
        GeneratorSpec {
            base_channels: 64,
            n_resblocks: 6,
            n_domains,
            image_size,
            scale: ChannelScale::ONE,
            role: NetworkId::Teacher,
        }
    }

    /// Student: half the feature maps of the teacher, 3 residual blocks.
    pub fn student(n_domains: usize, image_size: usize) -> Self {
        GeneratorSpec {
            base_channels: 64,
            n_resblocks: 3,
            n_domains,
            image_size,
            scale: ChannelScale::HALF,
            role: NetworkId::Student,
        }
    }

    /// S-Lite: quarter-width channels and a single residual block.
    pub fn s_lite(n_domains: usize, image_size: usize) -> Self {
        GeneratorSpec {
            base_channels: 64,
            n_resblocks: 1,
            n_domains,
            image_size,
            scale: ChannelScale::QUARTER,
            role: NetworkId::Student,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_resblocks < 1 {
            return Err(Error::InvalidSpec("need n_resblocks >= 1".into()));
        }
        if self.n_domains < 2 {
            return Err(Error::InvalidSpec("need n_domains >= 2".into()));
        }
        if self.image_size % 4 != 0 {
            return Err(Error::InvalidSpec(format!(
                "image_size {} must be divisible by 4 (two stride-2 downsamples)",
                self.image_size
            )));
        }
        let w0 = self.scale.apply(self.base_channels)?;
        if w0 < 4 {
            return Err(Error::InvalidSpec(format!("scaled base width {w0} < 4")));
        }
        Ok(())
    }

    /// Channel widths after the input conv, first and second downsample.
    pub fn widths(&self) -> Result<(usize, usize, usize)> {
        let w0 = self.scale.apply(self.base_channels)?;
        Ok((w0, 2 * w0, 4 * w0))
    }
}

/// Declarative discriminator description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub base_channels: usize,
    pub n_layers: usize,
    pub n_domains: usize,
    pub image_size: usize,
}

impl DiscriminatorSpec {
    pub fn full_scale(n_domains: usize, image_size: usize) -> Self {
        DiscriminatorSpec { base_channels: 64, n_layers: 6, n_domains, image_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::InvalidSpec("need n_layers >= 1".into()));
        }
        let div = 1usize << self.n_layers;
        if self.image_size % div != 0 {
            return Err(Error::InvalidSpec(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size, self.n_layers
            )));
        }
        Ok(())
    }

    pub fn patch_size(&self) -> usize {
        self.image_size >> self.n_layers
    }
}

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct NamedParam {
    name: String,
    value: ArcArray<f32, IxDyn>,
}

/// Ordered, named parameter tensors. Order is the serialization order of the
/// checkpoint blob and the alignment of optimizer state.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamIndexEntry {
    pub name: String,
    /// Byte offset into the little-endian f32 blob.
    pub offset: u64,
    pub shape: Vec<usize>,
}

impl ParamStore {
    fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> usize {
        self.params.push(NamedParam { name: name.into(), value: value.into_shared() });
        self.params.len() - 1
    }

    pub fn n_tensors(&self) -> usize {
        self.params.len()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn value(&self, idx: usize) -> ArcArray<f32, IxDyn> {
        self.params[idx].value.clone()
    }

    pub fn set_value(&mut self, idx: usize, value: ArrayD<f32>) {
        assert_eq!(self.params[idx].value.shape(), value.shape(), "param shape change");
        self.params[idx].value = value.into_shared();
    }

    /// Trainable leaf Vars, aligned with store order.
    pub fn bind(&self) -> Vec<Var> {
        self.params.iter().map(|p| Var::param_shared(p.value.clone())).collect()
    }

    /// Flat little-endian f32 blob in store order.
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 4);
        for p in &self.params {
            for v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn index_entries(&self) -> Vec<ParamIndexEntry> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.params.len());
        for p in &self.params {
            entries.push(ParamIndexEntry {
                name: p.name.clone(),
                offset,
                shape: p.value.shape().to_vec(),
            });
            offset += (p.value.len() * 4) as u64;
        }
        entries
    }

    /// Replace all values from a blob + index. Validates names, shapes and
    /// total length before touching any parameter.
    pub fn load_blob(&mut self, blob: &[u8], entries: &[ParamIndexEntry]) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        let expected_len: usize = self.param_count() * 4;
        if blob.len() != expected_len {
            return Err(Error::Checkpoint(format!(
                "blob length {} does not match expected {expected_len}",
                blob.len()
            )));
        }
        let mut staged: Vec<ArrayD<f32>> = Vec::with_capacity(entries.len());
        for (entry, param) in entries.iter().zip(&self.params) {
            if entry.name != param.name {
                return Err(Error::Checkpoint(format!(
                    "parameter name mismatch: checkpoint `{}` vs model `{}`",
                    entry.name, param.name
                )));
            }
            if entry.shape != param.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: {:?} vs {:?}",
                    entry.name,
                    entry.shape,
                    param.value.shape()
                )));
            }
            let n = param.value.len();
            let start = entry.offset as usize;
            let end = start + n * 4;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!("blob overrun for `{}`", entry.name)));
            }
            let mut data = Vec::with_capacity(n);
            for chunk in blob[start..end].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            staged
                .push(ArrayD::from_shape_vec(IxDyn(&entry.shape), data).expect("validated shape"));
        }
        for (param, value) in self.params.iter_mut().zip(staged) {
            param.value = value.into_shared();
        }
        Ok(())
    }

    /// SHA-256 of the parameter blob; cheap identity check for frozen models.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.blob());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// layer descriptors
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    transposed: bool,
}

impl Conv {
    fn apply(&self, leaves: &[Var], x: &Var) -> Var {
        let w = &leaves[self.w];
        let b = self.b.map(|i| &leaves[i]);
        if self.transposed {
            conv_transpose2d(x, w, b, self.stride, self.pad)
        } else {
            conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

#[derive(Clone, Debug)]
struct Affine {
    gamma: usize,
    beta: usize,
}

impl Affine {
    fn apply(&self, leaves: &[Var], x: &Var) -> Var {
        instance_norm(x, &leaves[self.gamma], &leaves[self.beta], INSTANCE_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    norm1: Affine,
    conv2: Conv,
    norm2: Affine,
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

/// Multi-domain image-to-image generator with a layer registry for
/// activation capture.
pub struct Generator {
    pub spec: GeneratorSpec,
    store: ParamStore,
    conv_in: Conv,
    norm_in: Affine,
    down: Vec<(Conv, Affine)>,
    blocks: Vec<ResBlock>,
    up: Vec<(Conv, Affine)>,
    conv_out: Conv,
    registry: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    bias: bool,
    stride: usize,
    pad: usize,
    transposed: bool,
) -> Conv {
    let w = store.add(format!("{name}.w"), nn::he_normal(rng, shape, fan_in));
    let out_ch = if transposed { shape[1] } else { shape[0] };
    let b = bias.then(|| store.add(format!("{name}.b"), nn::zeros(&[out_ch])));
    Conv { w, b, stride, pad, transposed }
}

fn init_affine(store: &mut ParamStore, name: &str, channels: usize) -> Affine {
    let gamma = store.add(format!("{name}.gamma"), nn::ones(&[channels]));
    let beta = store.add(format!("{name}.beta"), nn::zeros(&[channels]));
    Affine { gamma, beta }
}

/// Build a generator from its spec; initialization is a deterministic
/// function of (spec, seed).
pub fn build_generator(spec: &GeneratorSpec, seed: RandomSeed) -> Result<Generator> {
    spec.validate()?;
    let (w0, w1, w2) = spec.widths()?;
    let n_in = 3 + spec.n_domains;
    let mut rng = rng_stream(seed, "generator-init");
    let mut store = ParamStore::default();

    let conv_in =
        init_conv(&mut store, &mut rng, "conv_in", &[w0, n_in, 7, 7], n_in * 49, false, 1, 3, false);
    let norm_in = init_affine(&mut store, "conv_in.in", w0);

    let mut down = Vec::new();
    for (i, (ci, co)) in [(w0, w1), (w1, w2)].iter().enumerate() {
        let name = format!("down{}", i + 1);
        let conv =
            init_conv(&mut store, &mut rng, &name, &[*co, *ci, 4, 4], ci * 16, false, 2, 1, false);
        let norm = init_affine(&mut store, &format!("{name}.in"), *co);
        down.push((conv, norm));
    }

    let mut blocks = Vec::new();
    for i in 0..spec.n_resblocks {
        let name = format!("resblock{}", i + 1);
        let conv1 = init_conv(
            &mut store,
            &mut rng,
            &format!("{name}.conv1"),
            &[w2, w2, 3, 3],
            w2 * 9,
            false,
            1,
            1,
            false,
        );
        let norm1 = init_affine(&mut store, &format!("{name}.in1"), w2);
        let conv2 = init_conv(
            &mut store,
            &mut rng,
            &format!("{name}.conv2"),
            &[w2, w2, 3, 3],
            w2 * 9,
            false,
            1,
            1,
            false,
        );
        let norm2 = init_affine(&mut store, &format!("{name}.in2"), w2);
        blocks.push(ResBlock { conv1, norm1, conv2, norm2 });
    }

    let mut up = Vec::new();
    for (i, (ci, co)) in [(w2, w1), (w1, w0)].iter().enumerate() {
        let name = format!("up{}", i + 1);
        // transposed conv weight layout: (IC, OC, k, k)
        let conv =
            init_conv(&mut store, &mut rng, &name, &[*ci, *co, 4, 4], ci * 16, false, 2, 1, true);
        let norm = init_affine(&mut store, &format!("{name}.in"), *co);
        up.push((conv, norm));
    }

    let conv_out =
        init_conv(&mut store, &mut rng, "conv_out", &[3, w0, 7, 7], w0 * 49, false, 1, 3, false);

    let mut registry = vec!["conv_in".to_string(), "down1".to_string(), "down2".to_string()];
    for i in 0..spec.n_resblocks {
        registry.push(format!("resblock{}", i + 1));
    }
    registry.push(LAST_RESBLOCK_CONV.to_string());
    registry.push("up1".to_string());
    registry.push("up2".to_string());
    registry.push("conv_out".to_string());

    Ok(Generator {
        spec: spec.clone(),
        store,
        conv_in,
        norm_in,
        down,
        blocks,
        up,
        conv_out,
        registry,
    })
}

impl Generator {
    /// Capture-point names, in forward order.
    pub fn registry(&self) -> &[String] {
        &self.registry
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Trainable leaves aligned with the parameter store.
    pub fn bind(&self) -> Vec<Var> {
        self.store.bind()
    }

    fn check_capture(&self, capture: &[&str]) -> Result<()> {
        for name in capture {
            if !self.registry.iter().any(|r| r == name) {
                return Err(Error::UnknownLayer {
                    name: (*name).to_string(),
                    available: self.registry.clone(),
                });
            }
        }
        Ok(())
    }

    /// Graph-level forward: translate `x` under label vector `c`, capturing
    /// the requested registry activations. Captured values stay on the
    /// differentiation graph.
    pub fn forward_vars(
        &self,
        leaves: &[Var],
        x: &Var,
        c: &Var,
        capture: &[&str],
    ) -> Result<(Var, BTreeMap<String, Var>)> {
        self.check_capture(capture)?;
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "generator input must be (B,3,H,W), got {s:?}"
            )));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::ShapeMismatch(format!("input spatial {h}x{w} not divisible by 4")));
        }
        let cs = c.shape();
        if cs != [b, self.spec.n_domains] {
            return Err(Error::ShapeMismatch(format!(
                "label vector shape {:?} does not match (B={b}, n_domains={})",
                cs, self.spec.n_domains
            )));
        }
        let wants = |name: &str| capture.iter().any(|c| *c == name);
        let mut captured = BTreeMap::new();
        let mut grab = |name: &str, v: &Var| {
            if wants(name) {
                captured.insert(name.to_string(), v.clone());
            }
        };

        // spatially tile the label vector and concatenate channelwise
        let c_tiled = tensor::expand_axis(&tensor::expand_axis(c, 2, h), 3, w);
        let mut cur = tensor::concat(1, x, &c_tiled);

        cur = tensor::relu(&self.norm_in.apply(leaves, &self.conv_in.apply(leaves, &cur)));
        grab("conv_in", &cur);

        for (i, (conv, norm)) in self.down.iter().enumerate() {
            cur = tensor::relu(&norm.apply(leaves, &conv.apply(leaves, &cur)));
            grab(&format!("down{}", i + 1), &cur);
        }

        let n_blocks = self.blocks.len();
        for (i, block) in self.blocks.iter().enumerate() {
            let h1 = tensor::relu(&block.norm1.apply(leaves, &block.conv1.apply(leaves, &cur)));
            let h2 = block.norm2.apply(leaves, &block.conv2.apply(leaves, &h1));
            if i + 1 == n_blocks {
                grab(LAST_RESBLOCK_CONV, &h2);
            }
            cur = tensor::add(&cur, &h2);
            grab(&format!("resblock{}", i + 1), &cur);
        }

        for (i, (conv, norm)) in self.up.iter().enumerate() {
            cur = tensor::relu(&norm.apply(leaves, &conv.apply(leaves, &cur)));
            grab(&format!("up{}", i + 1), &cur);
        }

        let pre = self.conv_out.apply(leaves, &cur);
        grab("conv_out", &pre);
        let out = tensor::tanh(&pre);
        Ok((out, captured))
    }

    /// Typed forward over validated batches. Binds fresh leaves internally.
    pub fn forward(
        &self,
        x: &ImageBatch,
        c: &DomainVector,
        capture: &[&str],
    ) -> Result<(ImageBatch, BTreeMap<String, FeatureMaps>)> {
        let leaves = self.bind();
        let (out, captured) = self.forward_vars(&leaves, x.var(), c.var(), capture)?;
        let out = ImageBatch::from_var(out)?;
        let captured = captured
            .into_iter()
            .map(|(name, data)| {
                let fm = FeatureMaps { data, layer_name: name.clone() };
                (name, fm)
            })
            .collect();
        Ok((out, captured))
    }
}

/// Spec-level entry point mirroring [`Generator::forward`].
pub fn forward_generator(
    g: &Generator,
    x: &ImageBatch,
    c: &DomainVector,
    capture: &[&str],
) -> Result<(ImageBatch, BTreeMap<String, FeatureMaps>)> {
    g.forward(x, c, capture)
}

// ---------------------------------------------------------------------------
// discriminator
// ---------------------------------------------------------------------------

/// PatchGAN discriminator with an adversarial head and a domain
/// classification head.
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    store: ParamStore,
    layers: Vec<Conv>,
    adv_head: Conv,
    cls_head: Conv,
}

/// Build a discriminator; initialization is deterministic in (spec, seed).
pub fn build_discriminator(spec: &DiscriminatorSpec, seed: RandomSeed) -> Result<Discriminator> {
    spec.validate()?;
    let mut rng = rng_stream(seed, "discriminator-init");
    let mut store = ParamStore::default();
    let mut layers = Vec::new();
    let mut ci = 3usize;
    let mut co = spec.base_channels;
    for i in 0..spec.n_layers {
        let name = format!("layer{}", i + 1);
        layers.push(init_conv(
            &mut store,
            &mut rng,
            &name,
            &[co, ci, 4, 4],
            ci * 16,
            true,
            2,
            1,
            false,
        ));
        ci = co;
        co *= 2;
    }
    let adv_head =
        init_conv(&mut store, &mut rng, "adv_head", &[1, ci, 3, 3], ci * 9, false, 1, 1, false);
    let k = spec.patch_size().max(1);
    let cls_head = init_conv(
        &mut store,
        &mut rng,
        "cls_head",
        &[spec.n_domains, ci, k, k],
        ci * k * k,
        false,
        1,
        0,
        false,
    );
    Ok(Discriminator { spec: spec.clone(), store, layers, adv_head, cls_head })
}

impl Discriminator {
    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind(&self) -> Vec<Var> {
        self.store.bind()
    }

    /// Graph-level forward: returns (patch adversarial scores, class logits).
    pub fn forward_vars(&self, leaves: &[Var], x: &Var) -> Result<(Var, Var)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "discriminator input must be (B,3,H,W), got {s:?}"
            )));
        }
        let mut cur = x.clone();
        for conv in &self.layers {
            cur = tensor::leaky_relu(&conv.apply(leaves, &cur), LEAKY_SLOPE);
        }
        let final_side = cur.shape()[2];
        let k = self.spec.patch_size().max(1);
        if final_side != k {
            return Err(Error::ShapeMismatch(format!(
                "input side {} is incompatible with this discriminator (expects final feature side {k})",
                s[2]
            )));
        }
        let adv = self.adv_head.apply(leaves, &cur);
        let cls = self.cls_head.apply(leaves, &cur); // (B, n_domains, 1, 1)
        let b = s[0];
        let cls = tensor::reshape(&cls, &[b, self.spec.n_domains]);
        Ok((adv, cls))
    }

    /// Typed forward: (patch scores, [`ClassScore`]).
    pub fn forward(&self, x: &ImageBatch) -> Result<(Var, ClassScore)> {
        let leaves = self.bind();
        let (adv, cls) = self.forward_vars(&leaves, x.var())?;
        Ok((adv, ClassScore { scores: cls }))
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "gandistill-checkpoint-v1";
pub const BLOB_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// JSON manifest describing a parameter blob: spec, seed, step count and a
/// name -> (offset, shape) index into the flat little-endian f32 blob.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator_spec: Option<GeneratorSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator_spec: Option<DiscriminatorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_spec: Option<serde_json::Value>,
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub domain_names: Vec<String>,
    pub params: Vec<ParamIndexEntry>,
    pub blob_file: String,
    pub blob_len_bytes: u64,
}

fn write_checkpoint(dir: &Path, manifest: &CheckpointManifest, blob: &[u8]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join(BLOB_FILE))?;
    f.write_all(blob)?;
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", manifest.format)));
    }
    Ok(manifest)
}

fn read_blob(dir: &Path, manifest: &CheckpointManifest) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    std::fs::File::open(dir.join(&manifest.blob_file))?.read_to_end(&mut blob)?;
    if blob.len() as u64 != manifest.blob_len_bytes {
        return Err(Error::Checkpoint(format!(
            "blob length {} does not match manifest ({})",
            blob.len(),
            manifest.blob_len_bytes
        )));
    }
    Ok(blob)
}

/// Write a generator checkpoint directory (manifest + parameter blob).
pub fn save_generator(
    g: &Generator,
    dir: &Path,
    seed: RandomSeed,
    step: u64,
    domain_names: &[String],
) -> Result<()> {
    let blob = g.store.blob();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        kind: "generator".to_string(),
        generator_spec: Some(g.spec.clone()),
        discriminator_spec: None,
        extra_spec: None,
        seed: seed.0,
        step,
        domain_names: domain_names.to_vec(),
        params: g.store.index_entries(),
        blob_file: BLOB_FILE.to_string(),
        blob_len_bytes: blob.len() as u64,
    };
    write_checkpoint(dir, &manifest, &blob)
}

/// Load a generator checkpoint; refuses on any manifest/blob mismatch.
pub fn load_generator(dir: &Path) -> Result<(Generator, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != "generator" {
        return Err(Error::Checkpoint(format!(
            "expected generator checkpoint, got `{}`",
            manifest.kind
        )));
    }
    let spec = manifest
        .generator_spec
        .clone()
        .ok_or_else(|| Error::Checkpoint("manifest lacks generator_spec".into()))?;
    let mut g = build_generator(&spec, RandomSeed(manifest.seed))?;
    let blob = read_blob(dir, &manifest)?;
    g.store.load_blob(&blob, &manifest.params)?;
    Ok((g, manifest))
}

pub fn save_discriminator(
    d: &Discriminator,
    dir: &Path,
    seed: RandomSeed,
    step: u64,
    domain_names: &[String],
) -> Result<()> {
    let blob = d.store.blob();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        kind: "discriminator".to_string(),
        generator_spec: None,
        discriminator_spec: Some(d.spec.clone()),
        extra_spec: None,
        seed: seed.0,
        step,
        domain_names: domain_names.to_vec(),
        params: d.store.index_entries(),
        blob_file: BLOB_FILE.to_string(),
        blob_len_bytes: blob.len() as u64,
    };
    write_checkpoint(dir, &manifest, &blob)
}

pub fn load_discriminator(dir: &Path) -> Result<(Discriminator, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != "discriminator" {
        return Err(Error::Checkpoint(format!(
            "expected discriminator checkpoint, got `{}`",
            manifest.kind
        )));
    }
    let spec = manifest
        .discriminator_spec
        .clone()
        .ok_or_else(|| Error::Checkpoint("manifest lacks discriminator_spec".into()))?;
    let mut d = build_discriminator(&spec, RandomSeed(manifest.seed))?;
    let blob = read_blob(dir, &manifest)?;
    d.store.load_blob(&blob, &manifest.params)?;
    Ok((d, manifest))
}

/// Generic checkpoint for auxiliary models (e.g. the eval classifier).
pub fn save_params_with_spec(
    store: &ParamStore,
    dir: &Path,
    kind: &str,
    extra_spec: serde_json::Value,
    seed: RandomSeed,
    step: u64,
    domain_names: &[String],
) -> Result<()> {
    let blob = store.blob();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        kind: kind.to_string(),
        generator_spec: None,
        discriminator_spec: None,
        extra_spec: Some(extra_spec),
        seed: seed.0,
        step,
        domain_names: domain_names.to_vec(),
        params: store.index_entries(),
        blob_file: BLOB_FILE.to_string(),
        blob_len_bytes: blob.len() as u64,
    };
    write_checkpoint(dir, &manifest, &blob)
}

pub fn load_params_into(
    dir: &Path,
    kind: &str,
    store: &mut ParamStore,
) -> Result<CheckpointManifest> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected `{kind}` checkpoint, got `{}`",
            manifest.kind
        )));
    }
    let blob = read_blob(dir, &manifest)?;
    store.load_blob(&blob, &manifest.params)?;
    Ok(manifest)
}
