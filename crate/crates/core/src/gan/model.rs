//! Parameters and forward passes of the generator and discriminator.

use serde::{Deserialize, Serialize};

use crate::bench::data::ImageShape;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{BatchNormMode, BatchStats, Graph, NodeId, Tensor};

/// Fixed hyperparameters of one Semi-ACGAN instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub image: ImageShape,
    pub num_classes: usize,
    pub noise_dim: usize,
    pub gen_channels: usize,
    pub disc_channels: [usize; 2],
    pub leaky_slope: f64,
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Architecture {
    pub fn new(image: ImageShape, num_classes: usize) -> Self {
        Self {
            image,
            num_classes,
            noise_dim: 64,
            gen_channels: 16,
            disc_channels: [16, 32],
            leaky_slope: 0.2,
            dropout: 0.25,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ImageShape {
            channels,
            height,
            width,
        } = self.image;
        if channels == 0 || height == 0 || height != width || height % 4 != 0 {
            return Err(Error::Config(format!(
                "images must be square with side divisible by 4, got {height}x{width}x{channels}"
            )));
        }
        if self.num_classes < 2 || self.noise_dim == 0 {
            return Err(Error::Config("need >= 2 classes and a positive noise dim".into()));
        }
        Ok(())
    }

    /// Side length of the generator's first feature map.
    pub fn seed_side(&self) -> usize {
        self.image.height / 4
    }

    /// Side length after the discriminator's two stride-2 convolutions.
    pub fn trunk_side(&self) -> usize {
        self.image.height.div_ceil(2).div_ceil(2)
    }

    pub fn trunk_features(&self) -> usize {
        self.disc_channels[1] * self.trunk_side() * self.trunk_side()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    /// Exponential moving update; the stored variance is the unbiased estimate.
    pub fn absorb(&mut self, stats: &BatchStats, momentum: f64) {
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v * unbias;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub class_embedding: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub bn0: BatchNormParams,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub bn1: BatchNormParams,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub bn: BatchNormParams,
    pub valid_w: Tensor,
    pub valid_b: Tensor,
    pub class_w: Tensor,
    pub class_b: Tensor,
}

/// Θ: every value of one base model, generator and discriminator together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
}

fn uniform_fan_in(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
}

impl GeneratorParams {
    fn init(arch: &Architecture, rng: &mut RngStream) -> Self {
        let c = arch.gen_channels;
        let side = arch.seed_side();
        let proj_out = c * side * side;
        let out_ch = arch.image.channels;
        Self {
            class_embedding: rng.normal_tensor(&[arch.num_classes, arch.noise_dim]),
            proj_w: uniform_fan_in(rng, &[arch.noise_dim, proj_out], arch.noise_dim),
            proj_b: uniform_fan_in(rng, &[proj_out], arch.noise_dim),
            bn0: BatchNormParams::new(c),
            conv1_w: uniform_fan_in(rng, &[c, c, 3, 3], c * 9),
            conv1_b: uniform_fan_in(rng, &[c], c * 9),
            bn1: BatchNormParams::new(c),
            conv2_w: uniform_fan_in(rng, &[out_ch, c, 3, 3], c * 9),
            conv2_b: uniform_fan_in(rng, &[out_ch], c * 9),
        }
    }
}

impl DiscriminatorParams {
    fn init(arch: &Architecture, rng: &mut RngStream) -> Self {
        let [c1, c2] = arch.disc_channels;
        let cin = arch.image.channels;
        let feat = arch.trunk_features();
        Self {
            conv1_w: uniform_fan_in(rng, &[c1, cin, 3, 3], cin * 9),
            conv1_b: uniform_fan_in(rng, &[c1], cin * 9),
            conv2_w: uniform_fan_in(rng, &[c2, c1, 3, 3], c1 * 9),
            conv2_b: uniform_fan_in(rng, &[c2], c1 * 9),
            bn: BatchNormParams::new(c2),
            valid_w: uniform_fan_in(rng, &[feat, 1], feat),
            valid_b: uniform_fan_in(rng, &[1], feat),
            class_w: uniform_fan_in(rng, &[feat, arch.num_classes], feat),
            class_b: uniform_fan_in(rng, &[arch.num_classes], feat),
        }
    }
}

/// One named entry of a parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Anything that can be laid out as an ordered list of named tensors.
pub trait NamedTensors {
    /// Entries in declaration order. The order is part of the on-disk contract.
    fn named(&self) -> Vec<(&'static str, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;

    fn manifest(&self) -> Vec<ManifestEntry> {
        self.named()
            .into_iter()
            .map(|(name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

macro_rules! bn_entries {
    ($v:ident, $prefix:literal, $bn:expr, $($r:tt)*) => {
        $v.push(concat!($prefix, ".gamma"), $($r)* $bn.gamma);
        $v.push(concat!($prefix, ".beta"), $($r)* $bn.beta);
        $v.push(concat!($prefix, ".running_mean"), $($r)* $bn.running_mean);
        $v.push(concat!($prefix, ".running_var"), $($r)* $bn.running_var);
    };
}

struct Entries<T>(Vec<(&'static str, T)>);

impl<T> Entries<T> {
    fn push(&mut self, name: &'static str, t: T) {
        self.0.push((name, t));
    }
}

macro_rules! model_entries {
    ($s:expr, $($r:tt)*) => {{
        let mut v = Entries(Vec::new());
        let g = $($r)* $s.generator;
        v.push("g.class_embedding", $($r)* g.class_embedding);
        v.push("g.proj.weight", $($r)* g.proj_w);
        v.push("g.proj.bias", $($r)* g.proj_b);
        bn_entries!(v, "g.bn0", g.bn0, $($r)*);
        v.push("g.conv1.weight", $($r)* g.conv1_w);
        v.push("g.conv1.bias", $($r)* g.conv1_b);
        bn_entries!(v, "g.bn1", g.bn1, $($r)*);
        v.push("g.conv2.weight", $($r)* g.conv2_w);
        v.push("g.conv2.bias", $($r)* g.conv2_b);
        let d = $($r)* $s.discriminator;
        v.push("d.conv1.weight", $($r)* d.conv1_w);
        v.push("d.conv1.bias", $($r)* d.conv1_b);
        v.push("d.conv2.weight", $($r)* d.conv2_w);
        v.push("d.conv2.bias", $($r)* d.conv2_b);
        bn_entries!(v, "d.bn", d.bn, $($r)*);
        v.push("d.valid.weight", $($r)* d.valid_w);
        v.push("d.valid.bias", $($r)* d.valid_b);
        v.push("d.class.weight", $($r)* d.class_w);
        v.push("d.class.bias", $($r)* d.class_b);
        v.0
    }};
}

impl NamedTensors for ModelParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        model_entries!(self, &)
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        model_entries!(self, &mut)
    }
}

/// Running statistics are state, not trainable weights.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl ModelParams {
    pub fn init(arch: Architecture, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let generator = GeneratorParams::init(&arch, &mut rng.derive_str("generator"));
        let discriminator = DiscriminatorParams::init(&arch, &mut rng.derive_str("discriminator"));
        Ok(Self {
            arch,
            generator,
            discriminator,
        })
    }

    /// Same layout with every value set to zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let mut p = Self::init(arch, &mut RngStream::new(0))?;
        for (_, t) in p.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    /// Recover the architecture from a manifest produced by [`NamedTensors::manifest`].
    pub fn arch_from_manifest(manifest: &[ManifestEntry]) -> Result<Architecture> {
        let find = |name: &str| {
            manifest
                .iter()
                .find(|e| e.name == name)
                .map(|e| e.shape.clone())
                .ok_or_else(|| Error::Format(crate::FormatError::Manifest(format!("missing {name}"))))
        };
        let emb = find("g.class_embedding")?;
        let proj = find("g.proj.weight")?;
        let g1 = find("g.conv1.weight")?;
        let d1 = find("d.conv1.weight")?;
        let d2 = find("d.conv2.weight")?;
        let bad = |what: &str| Error::Format(crate::FormatError::Manifest(what.to_string()));
        if emb.len() != 2 || proj.len() != 2 || g1.len() != 4 || d1.len() != 4 || d2.len() != 4 {
            return Err(bad("unexpected tensor rank"));
        }
        let gen_channels = g1[0];
        let cells = proj[1] / gen_channels.max(1);
        let side = (cells as f64).sqrt().round() as usize;
        if side * side * gen_channels != proj[1] {
            return Err(bad("projection width is not a square feature map"));
        }
        let mut arch = Architecture::new(ImageShape::new(d1[1], side * 4, side * 4), emb[0]);
        arch.noise_dim = emb[1];
        arch.gen_channels = gen_channels;
        arch.disc_channels = [d1[0], d2[0]];
        let expected = ModelParams::zeros(arch)?.manifest();
        if expected != manifest {
            return Err(bad("layout does not match a Semi-ACGAN of the inferred architecture"));
        }
        Ok(arch)
    }
}

/// Graph handles for the generator's parameters.
#[derive(Clone, Debug)]
pub struct GenNodes {
    class_embedding: NodeId,
    proj_w: NodeId,
    proj_b: NodeId,
    bn0: (NodeId, NodeId),
    conv1_w: NodeId,
    conv1_b: NodeId,
    bn1: (NodeId, NodeId),
    conv2_w: NodeId,
    conv2_b: NodeId,
}

/// Graph handles for the discriminator's parameters.
#[derive(Clone, Debug)]
pub struct DiscNodes {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
    pub bn: (NodeId, NodeId),
    pub valid_w: NodeId,
    pub valid_b: NodeId,
    pub class_w: NodeId,
    pub class_b: NodeId,
}

impl GenNodes {
    /// Trainable leaves in the same order as [`GeneratorParams::trainable_mut`].
    pub fn trainable(&self) -> Vec<NodeId> {
        vec![
            self.class_embedding,
            self.proj_w,
            self.proj_b,
            self.bn0.0,
            self.bn0.1,
            self.conv1_w,
            self.conv1_b,
            self.bn1.0,
            self.bn1.1,
            self.conv2_w,
            self.conv2_b,
        ]
    }
}

impl DiscNodes {
    /// Trainable leaves in the same order as [`DiscriminatorParams::trainable_mut`].
    pub fn trainable(&self) -> Vec<NodeId> {
        vec![
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.bn.0,
            self.bn.1,
            self.valid_w,
            self.valid_b,
            self.class_w,
            self.class_b,
        ]
    }
}

impl GeneratorParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> GenNodes {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), trainable);
        GenNodes {
            class_embedding: leaf(&self.class_embedding),
            proj_w: leaf(&self.proj_w),
            proj_b: leaf(&self.proj_b),
            bn0: (leaf(&self.bn0.gamma), leaf(&self.bn0.beta)),
            conv1_w: leaf(&self.conv1_w),
            conv1_b: leaf(&self.conv1_b),
            bn1: (leaf(&self.bn1.gamma), leaf(&self.bn1.beta)),
            conv2_w: leaf(&self.conv2_w),
            conv2_b: leaf(&self.conv2_b),
        }
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        vec![
            &self.class_embedding,
            &self.proj_w,
            &self.proj_b,
            &self.bn0.gamma,
            &self.bn0.beta,
            &self.conv1_w,
            &self.conv1_b,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.conv2_w,
            &self.conv2_b,
        ]
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.class_embedding,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.bn0.gamma,
            &mut self.bn0.beta,
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2_w,
            &mut self.conv2_b,
        ]
    }
}

impl DiscriminatorParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DiscNodes {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), trainable);
        DiscNodes {
            conv1_w: leaf(&self.conv1_w),
            conv1_b: leaf(&self.conv1_b),
            conv2_w: leaf(&self.conv2_w),
            conv2_b: leaf(&self.conv2_b),
            bn: (leaf(&self.bn.gamma), leaf(&self.bn.beta)),
            valid_w: leaf(&self.valid_w),
            valid_b: leaf(&self.valid_b),
            class_w: leaf(&self.class_w),
            class_b: leaf(&self.class_b),
        }
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.bn.gamma,
            &self.bn.beta,
            &self.valid_w,
            &self.valid_b,
            &self.class_w,
            &self.class_b,
        ]
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.valid_w,
            &mut self.valid_b,
            &mut self.class_w,
            &mut self.class_b,
        ]
    }
}

/// Whether a forward pass runs in training mode (batch statistics, live dropout).
pub enum Phase<'r> {
    Train(&'r mut RngStream),
    /// Batch statistics without dropout, for re-estimating running statistics.
    Statistics,
    Eval,
}

/// Discriminator outputs for one forward pass.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// `[N, 1]` probability that each item is real.
    pub p_source: NodeId,
    /// `[N, C]` class distribution per item.
    pub p_class: NodeId,
    /// `[N, C]` pre-softmax class scores.
    pub class_logits: NodeId,
    pub bn_stats: Option<BatchStats>,
}

pub fn generator_forward(
    g: &mut Graph,
    arch: &Architecture,
    params: &GeneratorParams,
    nodes: &GenNodes,
    noise: NodeId,
    labels: &[usize],
    train: bool,
) -> Result<(NodeId, Vec<BatchStats>)> {
    let n = labels.len();
    if g.shape(noise) != [n, arch.noise_dim] {
        return Err(Error::shape(
            "generate",
            format!("noise {:?} for {n} labels and noise dim {}", g.shape(noise), arch.noise_dim),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= arch.num_classes) {
        return Err(Error::Contract(format!(
            "class id {bad} out of range for {} classes",
            arch.num_classes
        )));
    }
    let c = arch.gen_channels;
    let side = arch.seed_side();
    let mut stats = Vec::new();
    let bn = |g: &mut Graph, x, (gamma, beta), p: &BatchNormParams, stats: &mut Vec<BatchStats>| {
        let mode = if train {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval {
                mean: &p.running_mean,
                var: &p.running_var,
            }
        };
        let (y, s) = g.batch_norm(x, gamma, beta, mode, arch.bn_eps)?;
        stats.extend(s);
        Ok::<_, Error>(y)
    };

    let emb = g.embedding(nodes.class_embedding, labels)?;
    let h = g.mul(noise, emb)?;
    let h = g.linear(h, nodes.proj_w, nodes.proj_b)?;
    let h = g.reshape(h, &[n, c, side, side])?;
    let h = bn(g, h, nodes.bn0, &params.bn0, &mut stats)?;
    let h = g.upsample_nearest(h, 4)?;
    let h = g.conv2d(h, nodes.conv1_w, Some(nodes.conv1_b), 1, 1)?;
    let h = bn(g, h, nodes.bn1, &params.bn1, &mut stats)?;
    let h = g.leaky_relu(h, arch.leaky_slope);
    let h = g.conv2d(h, nodes.conv2_w, Some(nodes.conv2_b), 1, 1)?;
    Ok((g.tanh(h), stats))
}

pub fn discriminator_forward(
    g: &mut Graph,
    arch: &Architecture,
    params: &DiscriminatorParams,
    nodes: &DiscNodes,
    images: NodeId,
    phase: Phase<'_>,
) -> Result<DiscOutput> {
    let s = g.shape(images).to_vec();
    let img = arch.image;
    if s.len() != 4 || s[1..] != [img.channels, img.height, img.width] {
        return Err(Error::shape(
            "discriminate",
            format!("images {s:?}, expected [N, {}, {}, {}]", img.channels, img.height, img.width),
        ));
    }
    let n = s[0];
    let (mut rng, train) = match phase {
        Phase::Train(r) => (Some(r), true),
        Phase::Statistics => (None, true),
        Phase::Eval => (None, false),
    };
    let h = g.conv2d(images, nodes.conv1_w, Some(nodes.conv1_b), 2, 1)?;
    let h = g.leaky_relu(h, arch.leaky_slope);
    let h = g.dropout(h, arch.dropout, rng.as_deref_mut())?;
    let h = g.conv2d(h, nodes.conv2_w, Some(nodes.conv2_b), 2, 1)?;
    let h = g.leaky_relu(h, arch.leaky_slope);
    let h = g.dropout(h, arch.dropout, rng)?;
    let mode = if train {
        BatchNormMode::Train
    } else {
        BatchNormMode::Eval {
            mean: &params.bn.running_mean,
            var: &params.bn.running_var,
        }
    };
    let (h, bn_stats) = g.batch_norm(h, nodes.bn.0, nodes.bn.1, mode, arch.bn_eps)?;
    let feat = g.reshape(h, &[n, arch.trunk_features()])?;
    let valid = g.linear(feat, nodes.valid_w, nodes.valid_b)?;
    let p_source = g.sigmoid(valid);
    let class_logits = g.linear(feat, nodes.class_w, nodes.class_b)?;
    let p_class = g.softmax(class_logits)?;
    Ok(DiscOutput {
        p_source,
        p_class,
        class_logits,
        bn_stats,
    })
}
