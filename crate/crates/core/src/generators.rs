//! Clean-image and noise generators, the discriminator, and the per-variant
//! constraints that tie the noise generator to an assumed noise family.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::kv::KvMap;
use crate::nn::{self, Conv, Init, Linear, ParamSet};
use crate::noise::NoiseSpec;
use crate::tensor::sparse::SparseMap;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 8x8, width 32; for CPU-speed experiments.
    Tiny,
    /// 32x32, width 128.
    Small,
    /// 128x128, widths 64..1024.
    Large,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "large" => Ok(Preset::Large),
            _ => Err(Error::Config(format!("unknown preset {s:?} (tiny, small, large)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Large => "large",
        })
    }
}

/// Layer widths of one generator/discriminator pair.
///
/// Generators project the latent to `4 x 4 x base_width`, then run one
/// upsampling residual block per entry of `up_widths`, then ReLU, a 3x3
/// convolution to `channels` and tanh. Discriminators run `down_blocks`
/// (`(width, halves_resolution)`), ReLU, global average pooling and a linear
/// layer to one logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetArch {
    pub preset: Preset,
    pub resolution: usize,
    pub channels: usize,
    /// Image latent `z_x`.
    pub latent_dim: usize,
    /// Noise latent `z_n`.
    pub noise_latent_dim: usize,
    pub base_width: usize,
    pub up_widths: Vec<usize>,
    pub down_blocks: Vec<(usize, bool)>,
    pub residual_scale: f64,
}

impl NetArch {
    pub fn preset(preset: Preset, channels: usize) -> Self {
        let (resolution, latent_dim, base_width, up_widths, down_blocks) = match preset {
            // 8x8 toy images have 192 values; a 128-d image latent lets G_x soak up part of the noise.
            Preset::Tiny => (8, 16, 32, vec![32], vec![(32, true), (32, false)]),
            Preset::Small => (32, 128, 128, vec![128; 3], vec![(128, true), (128, true), (128, false), (128, false)]),
            Preset::Large => (
                128,
                256,
                1024,
                vec![1024, 512, 256, 128, 64],
                vec![(64, true), (128, true), (256, true), (512, true), (1024, true), (1024, false)],
            ),
        };
        let noise_latent_dim = if preset == Preset::Tiny { 128 } else { latent_dim };
        NetArch { preset, resolution, channels, latent_dim, noise_latent_dim, base_width, up_widths, down_blocks, residual_scale: 0.1 }
    }

    /// Output side length implied by the up path.
    pub fn generated_side(&self) -> usize {
        4 << self.up_widths.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct UpBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

/// Residual generator `z -> tanh(...)`, shape `[N, side, side, out_channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub input_dim: usize,
    pub out_channels: usize,
    base_width: usize,
    proj: Linear,
    blocks: Vec<UpBlock>,
    out: Conv,
    residual_scale: f64,
}

impl Generator {
    pub fn build<T: Real, R: Rng>(
        name: &str,
        arch: &NetArch,
        input_dim: usize,
        out_channels: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Self {
        let mut init = Init { params, rng };
        let proj = init.linear(&format!("{name}.proj"), input_dim, 16 * arch.base_width);
        let mut cin = arch.base_width;
        let mut blocks = Vec::new();
        for (i, &cout) in arch.up_widths.iter().enumerate() {
            let p = format!("{name}.up{i}");
            blocks.push(UpBlock {
                conv1: init.conv(&format!("{p}.conv1"), cin, cout, 3),
                conv2: init.conv(&format!("{p}.conv2"), cout, cout, 3),
                shortcut: (cin != cout).then(|| init.conv(&format!("{p}.shortcut"), cin, cout, 1)),
            });
            cin = cout;
        }
        let out = init.conv(&format!("{name}.out"), cin, out_channels, 3);
        Generator { input_dim, out_channels, base_width: arch.base_width, proj, blocks, out, residual_scale: arch.residual_scale }
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, z: &Tensor<T>) -> Tensor<T> {
        let n = z.shape()[0];
        let mut h = self.proj.forward(p, z).reshape(&[n, 4, 4, self.base_width]);
        let scale = T::of(self.residual_scale);
        for b in &self.blocks {
            let up = nn::upsample2(&h);
            let main = b.conv2.forward(p, &b.conv1.forward(p, &nn::upsample2(&h.relu())).relu());
            let skip = match &b.shortcut {
                Some(c) => c.forward(p, &up),
                None => up,
            };
            h = skip.add(&main.scale(scale));
        }
        self.out.forward(p, &h.relu()).tanh()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DownBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
    down: bool,
    leading_activation: bool,
}

/// Residual discriminator `[N, H, W, C] -> [N]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub in_channels: usize,
    blocks: Vec<DownBlock>,
    head: Linear,
    residual_scale: f64,
}

impl Discriminator {
    /// The first block sees raw pixels, so it skips the leading activation.
    pub fn build<T: Real, R: Rng>(arch: &NetArch, in_channels: usize, params: &mut ParamSet<T>, rng: &mut R) -> Self {
        let mut init = Init { params, rng };
        let mut cin = in_channels;
        let mut blocks = Vec::new();
        for (i, &(cout, down)) in arch.down_blocks.iter().enumerate() {
            let p = format!("d.block{i}");
            blocks.push(DownBlock {
                conv1: init.conv(&format!("{p}.conv1"), cin, cout, 3),
                conv2: init.conv(&format!("{p}.conv2"), cout, cout, 3),
                shortcut: (cin != cout).then(|| init.conv(&format!("{p}.shortcut"), cin, cout, 1)),
                down,
                leading_activation: i > 0,
            });
            cin = cout;
        }
        let head = init.linear("d.head", cin, 1);
        Discriminator { in_channels, blocks, head, residual_scale: arch.residual_scale }
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, y: &Tensor<T>) -> Tensor<T> {
        let n = y.shape()[0];
        let scale = T::of(self.residual_scale);
        let mut h = y.clone();
        for b in &self.blocks {
            let pre = if b.leading_activation { h.relu() } else { h.clone() };
            let mut main = b.conv2.forward(p, &b.conv1.forward(p, &pre).relu());
            let mut skip = match &b.shortcut {
                Some(c) => c.forward(p, &h),
                None => h.clone(),
            };
            if b.down {
                main = nn::avgpool2(&main);
                skip = nn::avgpool2(&skip);
            }
            h = skip.add(&main.scale(scale));
        }
        self.head.forward(p, &nn::global_avg(&h.relu())).reshape(&[n])
    }
}

/// Generator-pair model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gan,
    PAmbientGan,
    AmbientGan,
    Si0,
    Si1,
    Si2,
    Sd0,
    Sd1Mult,
    Sd1Poisson,
    Sd2,
    Sd3,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Gan,
        Variant::PAmbientGan,
        Variant::AmbientGan,
        Variant::Si0,
        Variant::Si1,
        Variant::Si2,
        Variant::Sd0,
        Variant::Sd1Mult,
        Variant::Sd1Poisson,
        Variant::Sd2,
        Variant::Sd3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gan => "gan",
            Variant::PAmbientGan => "p_ambient_gan",
            Variant::AmbientGan => "ambient_gan",
            Variant::Si0 => "si0",
            Variant::Si1 => "si1",
            Variant::Si2 => "si2",
            Variant::Sd0 => "sd0",
            Variant::Sd1Mult => "sd1_mult",
            Variant::Sd1Poisson => "sd1_poisson",
            Variant::Sd2 => "sd2",
            Variant::Sd3 => "sd3",
        }
    }

    /// Has a noise-generator network (as opposed to none or a scalar).
    pub fn has_noise_network(self) -> bool {
        !matches!(self, Variant::Gan | Variant::AmbientGan | Variant::PAmbientGan)
    }

    /// Noise generator also consumes the image latent.
    pub fn noise_sees_image_latent(self) -> bool {
        matches!(self, Variant::Sd0 | Variant::Sd2 | Variant::Sd3)
    }

    /// Noise network emits a standard-deviation map rather than noise.
    pub fn emits_sigma(self) -> bool {
        matches!(self, Variant::Si1 | Variant::Sd1Mult | Variant::Sd1Poisson | Variant::Sd2)
    }

    pub fn default_transforms(self) -> TransformSet {
        match self {
            Variant::Si2 => TransformSet::ALL,
            Variant::Sd3 => TransformSet { inversion: true, ..TransformSet::NONE },
            _ => TransformSet::NONE,
        }
    }

    pub fn default_relation(self) -> Relation {
        match self {
            Variant::Sd1Mult => Relation::Mult,
            Variant::Sd1Poisson => Relation::Sqrt,
            _ => Relation::Identity,
        }
    }

    /// Whether the generator side carries any trainable noise parameters.
    pub fn learns_noise(self) -> bool {
        self.has_noise_network() || self == Variant::PAmbientGan
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Signal-noise relation applied to a sigma map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `sigma`
    Identity,
    /// `sigma * x01`
    Mult,
    /// `sigma * sqrt(x01)`
    Sqrt,
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Relation::Identity),
            "mult" => Ok(Relation::Mult),
            "sqrt" => Ok(Relation::Sqrt),
            _ => Err(Error::Config(format!("unknown relation {s:?} (identity, mult, sqrt)"))),
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Identity => "identity",
            Relation::Mult => "mult",
            Relation::Sqrt => "sqrt",
        })
    }
}

/// Random transformations applied to the noise-generator output, in the
/// fixed order rotation, channel shuffle, color inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSet {
    pub rotation: bool,
    pub shuffle: bool,
    pub inversion: bool,
}

impl TransformSet {
    pub const NONE: TransformSet = TransformSet { rotation: false, shuffle: false, inversion: false };
    pub const ALL: TransformSet = TransformSet { rotation: true, shuffle: true, inversion: true };

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }
}

impl FromStr for TransformSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = TransformSet::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "all" => t = TransformSet::ALL,
                "rotation" => t.rotation = true,
                "channel_shuffle" => t.shuffle = true,
                "color_inversion" => t.inversion = true,
                _ => return Err(Error::Config(format!("unknown transform {part:?}"))),
            }
        }
        Ok(t)
    }
}

impl fmt::Display for TransformSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.rotation {
            parts.push("rotation");
        }
        if self.shuffle {
            parts.push("channel_shuffle");
        }
        if self.inversion {
            parts.push("color_inversion");
        }
        if parts.is_empty() {
            parts.push("none");
        }
        f.write_str(&parts.join(","))
    }
}

/// Variant-level settings of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub variant: Variant,
    pub transforms: TransformSet,
    pub relation: Relation,
    /// Upper bound of the sigma head, on the `[-1, 1]` scale.
    pub sigma_max: f64,
    /// Initial value of the scalar sigma of the parametric baseline.
    pub p_sigma_init: f64,
}

impl BundleConfig {
    pub fn for_variant(variant: Variant) -> Self {
        BundleConfig {
            variant,
            transforms: variant.default_transforms(),
            relation: variant.default_relation(),
            sigma_max: 1.0,
            p_sigma_init: 0.1,
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("variant", self.variant);
        m.insert("transforms", self.transforms);
        m.insert("relation", self.relation);
        m.insert("sigma_max", self.sigma_max);
        m.insert("p_sigma_init", self.p_sigma_init);
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let variant: Variant = m.parse_or("variant", Variant::Si1)?;
        let d = BundleConfig::for_variant(variant);
        let c = BundleConfig {
            variant,
            transforms: m.parse_or("transforms", d.transforms)?,
            relation: m.parse_or("relation", d.relation)?,
            sigma_max: m.parse_or("sigma_max", d.sigma_max)?,
            p_sigma_init: m.parse_or("p_sigma_init", d.p_sigma_init)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_max > 0.0 && self.sigma_max.is_finite()) {
            return Err(invalid("bundle config", format!("sigma_max {} must be positive", self.sigma_max)));
        }
        if !self.p_sigma_init.is_finite() {
            return Err(invalid("bundle config", "p_sigma_init must be finite"));
        }
        if self.relation != Relation::Identity
            && !matches!(self.variant, Variant::Sd1Mult | Variant::Sd1Poisson | Variant::PAmbientGan)
        {
            return Err(invalid("bundle config", format!("variant {} takes no signal-noise relation", self.variant)));
        }
        if !self.transforms.is_empty() && !matches!(self.variant, Variant::Si0 | Variant::Si2 | Variant::Sd0 | Variant::Sd3) {
            return Err(invalid("bundle config", format!("variant {} takes no transforms", self.variant)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentRole {
    Image,
    Noise,
}

#[derive(Debug, Clone)]
pub struct LatentBatch<T: Real> {
    pub z: Tensor<T>,
    pub role: LatentRole,
}

impl<T: Real> LatentBatch<T> {
    pub fn sample<R: Rng + ?Sized>(n: usize, dim: usize, role: LatentRole, rng: &mut R) -> Self {
        LatentBatch { z: nn::randn(&[n, dim], rng), role }
    }

    pub fn len(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[1]
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let d = self.dim();
        LatentBatch { z: Tensor::from_vec(self.z.data()[start * d..end * d].to_vec(), &[end - start, d]), role: self.role }
    }
}

/// Which copy of the generator weights to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Live,
    Ema,
}

/// Output of the noise path for one batch.
#[derive(Debug, Clone)]
pub struct NoiseDraw<T: Real> {
    /// Raw noise-generator output (sigma map or unconstrained noise), when
    /// the variant has a noise network.
    pub head: Option<Tensor<T>>,
    /// Input fed to the noise network.
    pub head_input: Option<Tensor<T>>,
    pub noise: Tensor<T>,
}

/// Clean-image generator, noise generator and their EMA shadows.
#[derive(Debug, Clone)]
pub struct GeneratorBundle<T: Real> {
    pub config: BundleConfig,
    pub arch: NetArch,
    /// Known measurement model, for the ambient variant.
    pub ambient: Option<NoiseSpec>,
    pub g_x: Generator,
    pub g_n: Option<Generator>,
    pub params_x: ParamSet<T>,
    /// Noise-generator parameters, or the scalar sigma of the parametric
    /// baseline (empty for variants without learned noise).
    pub params_n: ParamSet<T>,
    pub ema_x: ParamSet<T>,
    pub ema_n: ParamSet<T>,
}

pub const BUNDLE_KIND: &str = "generator_bundle";
const BLOCK_LAYOUT: &str = "pre-activation residual blocks; nearest upsampling; average-pool downsampling";

impl<T: Real> GeneratorBundle<T> {
    pub fn new<R: Rng>(config: BundleConfig, arch: NetArch, ambient: Option<NoiseSpec>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if arch.generated_side() != arch.resolution {
            return Err(invalid("architecture", format!("up path yields {} px, resolution is {}", arch.generated_side(), arch.resolution)));
        }
        let v = config.variant;
        if v == Variant::AmbientGan && ambient.is_none() {
            return Err(invalid("bundle", "ambient variant needs a measurement noise spec"));
        }
        let mut params_x = ParamSet::new();
        let g_x = Generator::build("g_x", &arch, arch.latent_dim, arch.channels, &mut params_x, rng);
        let mut params_n = ParamSet::new();
        let g_n = if v.has_noise_network() {
            let din = if v.noise_sees_image_latent() { arch.noise_latent_dim + arch.latent_dim } else { arch.noise_latent_dim };
            Some(Generator::build("g_n", &arch, din, arch.channels, &mut params_n, rng))
        } else {
            if v == Variant::PAmbientGan {
                Init { params: &mut params_n, rng }.scalar("p_sigma", config.p_sigma_init);
            }
            None
        };
        Ok(GeneratorBundle {
            ema_x: params_x.clone(),
            ema_n: params_n.clone(),
            config,
            arch,
            ambient,
            g_x,
            g_n,
            params_x,
            params_n,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn weights(&self, w: Weights) -> (&ParamSet<T>, &ParamSet<T>) {
        match w {
            Weights::Live => (&self.params_x, &self.params_n),
            Weights::Ema => (&self.ema_x, &self.ema_n),
        }
    }

    /// `x_g = g_x(z_x)`, shape `[N, H, W, C]`, values in `(-1, 1)`.
    pub fn generate_clean(&self, z_x: &LatentBatch<T>, w: Weights) -> Result<Tensor<T>> {
        if z_x.role != LatentRole::Image {
            return Err(invalid("latent", "clean generator needs an image latent"));
        }
        if z_x.z.shape().len() != 2 || z_x.dim() != self.g_x.input_dim {
            return Err(invalid("latent", format!("expected [N, {}], got {:?}", self.g_x.input_dim, z_x.z.shape())));
        }
        Ok(self.g_x.forward(self.weights(w).0, &z_x.z))
    }

    /// Noise for a batch of generated images `x_g`.
    ///
    /// `eps` is the external standard-normal sample used by the Gaussian
    /// variants; transforms draw from `rng`.
    pub fn noise_from_variant<R: Rng + ?Sized>(
        &self,
        z_n: Option<&LatentBatch<T>>,
        z_x: Option<&LatentBatch<T>>,
        x_g: &Tensor<T>,
        eps: &Tensor<T>,
        rng: &mut R,
        w: Weights,
    ) -> Result<NoiseDraw<T>> {
        let v = self.variant();
        let shape = x_g.shape().to_vec();
        if eps.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("eps {:?} does not match images {shape:?}", eps.shape())));
        }
        let (_, pn) = self.weights(w);
        if v == Variant::PAmbientGan {
            let sigma = pn.get(0).abs().broadcast_scalar(&shape);
            let sigma = relate(self.config.relation, &sigma, x_g);
            return Ok(NoiseDraw { head: None, head_input: None, noise: reparameterize_gaussian(&sigma, eps)? });
        }
        let g_n = self.g_n.as_ref().ok_or_else(|| invalid("variant", format!("{v} has no noise generator")))?;
        let z_n = z_n.ok_or_else(|| invalid("noise input", format!("{v} needs a noise latent")))?;
        if z_n.role != LatentRole::Noise {
            return Err(invalid("noise input", "noise generator needs a noise latent"));
        }
        if z_n.len() != shape[0] {
            return Err(invalid("noise input", format!("{} latents for {} images", z_n.len(), shape[0])));
        }
        let input = if v.noise_sees_image_latent() {
            let z_x = z_x.ok_or_else(|| invalid("noise input", format!("{v} needs the image latent")))?;
            if z_x.role != LatentRole::Image || z_x.len() != z_n.len() {
                return Err(invalid("noise input", "image latent must match the noise latent batch"));
            }
            nn::concat_last(&z_n.z, &z_x.z)
        } else {
            z_n.z.clone()
        };
        if input.shape()[1] != g_n.input_dim {
            return Err(invalid("noise input", format!("noise generator takes {} dims, got {}", g_n.input_dim, input.shape()[1])));
        }
        let raw = g_n.forward(pn, &input);
        if raw.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("noise generator emits {:?}, images are {shape:?}", raw.shape())));
        }
        let (head, noise) = if v.emits_sigma() {
            let sigma = raw.add_scalar(T::one()).scale(T::of(self.config.sigma_max / 2.0));
            let scaled = relate(self.config.relation, &sigma, x_g);
            (sigma, reparameterize_gaussian(&scaled, eps)?)
        } else {
            let n = apply_transform(&raw, self.config.transforms, rng)?;
            (raw, n)
        };
        Ok(NoiseDraw { head: Some(head), head_input: Some(input), noise })
    }

    /// Sample observations `x_g + n_g` from the EMA generators, returning
    /// `(x_g, n_g)`; independent latents per image.
    pub fn sample_pairs<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Tensor<T>, Tensor<T>)> {
        let z_x = LatentBatch::sample(n, self.arch.latent_dim, LatentRole::Image, rng);
        let x = self.generate_clean(&z_x, Weights::Ema)?.detach();
        if !self.variant().learns_noise() {
            return Err(invalid("bundle", format!("{} has no learned noise model", self.variant())));
        }
        let z_n = LatentBatch::sample(n, self.arch.noise_latent_dim, LatentRole::Noise, rng);
        let eps = nn::randn(x.shape(), rng);
        let d = self.noise_from_variant(Some(&z_n), Some(&z_x), &x, &eps, rng, Weights::Ema)?;
        Ok((x, d.noise.detach()))
    }

    pub fn cast<U: Real>(&self) -> GeneratorBundle<U> {
        GeneratorBundle {
            config: self.config.clone(),
            arch: self.arch.clone(),
            ambient: self.ambient.clone(),
            g_x: self.g_x.clone(),
            g_n: self.g_n.clone(),
            params_x: self.params_x.cast(),
            params_n: self.params_n.cast(),
            ema_x: self.ema_x.cast(),
            ema_n: self.ema_n.cast(),
        }
    }
}

impl GeneratorBundle<f32> {
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "variant": self.config.variant.name(),
            "config": self.config,
            "arch": self.arch,
            "ambient": self.ambient.as_ref().map(|s| s.to_kv().to_string()),
            "block_layout": BLOCK_LAYOUT,
        })
    }

    pub fn write_into(&self, ck: &mut Checkpoint) {
        ck.put_params("g_x", &self.params_x);
        ck.put_params("g_n", &self.params_n);
        ck.put_params("ema_x", &self.ema_x);
        ck.put_params("ema_n", &self.ema_n);
    }

    /// Rebuild from a container; `expect` rejects a different variant.
    pub fn from_checkpoint(ck: &Checkpoint, expect: Option<Variant>) -> Result<Self> {
        ck.expect_kind(BUNDLE_KIND)?;
        let meta = &ck.meta["bundle"];
        let config: BundleConfig = serde_json::from_value(meta["config"].clone())?;
        if let Some(v) = expect {
            if v != config.variant {
                return Err(Error::Checkpoint(format!("checkpoint holds variant {}, expected {v}", config.variant)));
            }
        }
        let arch: NetArch = serde_json::from_value(meta["arch"].clone())?;
        let ambient = match meta["ambient"].as_str() {
            Some(s) => Some(NoiseSpec::from_kv(&KvMap::parse(s)?)?),
            None => None,
        };
        // parameter values are overwritten below; the seed only fixes layout
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut b = GeneratorBundle::new(config, arch, ambient, &mut rng)?;
        ck.load_params("g_x", &mut b.params_x)?;
        ck.load_params("g_n", &mut b.params_n)?;
        ck.load_params("ema_x", &mut b.ema_x)?;
        ck.load_params("ema_n", &mut b.ema_n)?;
        Ok(b)
    }
}

fn relate<T: Real>(relation: Relation, sigma: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    match relation {
        Relation::Identity => sigma.clone(),
        Relation::Mult => sigma.mul(&x01(x)),
        Relation::Sqrt => sigma.mul(&x01(x).sqrt_eps(T::of(1e-12))),
    }
}

fn x01<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.add_scalar(T::one()).scale(T::of(0.5))
}

/// Scale a sigma map by the signal: `sigma * x01` or `sigma * sqrt(x01)`,
/// with `x01 = (x + 1) / 2`.
pub fn relational_sigma<T: Real>(relation: Relation, sigma: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if sigma.shape() != x.shape() {
        return Err(Error::Shape(format!("sigma {:?} vs images {:?}", sigma.shape(), x.shape())));
    }
    Ok(relate(relation, sigma, x))
}

/// `n = sigma_map * eps`.
pub fn reparameterize_gaussian<T: Real>(sigma_map: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if sigma_map.shape() != eps.shape() {
        return Err(Error::Shape(format!("sigma {:?} vs eps {:?}", sigma_map.shape(), eps.shape())));
    }
    if let Some(v) = sigma_map.data().iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Precondition(format!("sigma map must be nonnegative, found {v}")));
    }
    Ok(sigma_map.mul_fixed(eps))
}

/// `y = x + n`, no clipping.
pub fn compose_observation<T: Real>(x: &Tensor<T>, n: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != n.shape() {
        return Err(Error::Shape(format!("image {:?} vs noise {:?}", x.shape(), n.shape())));
    }
    Ok(x.add(n))
}

/// Source index (in `[H, W]`) of output pixel `(y, x)` after `quarter_turns`
/// clockwise 90 degree rotations of a square image of side `s`.
fn rotated_source(y: usize, x: usize, s: usize, quarter_turns: usize) -> (usize, usize) {
    let (mut sy, mut sx) = (y, x);
    for _ in 0..quarter_turns % 4 {
        (sy, sx) = (s - 1 - sx, sy);
    }
    (sy, sx)
}

/// Apply independently drawn transforms to each sample of `n_hat`
/// (`[N, H, W, C]`): rotation by a multiple of 90 degrees, a channel
/// permutation, and per-channel negation with probability 1/2.
pub fn apply_transform<T: Real, R: Rng + ?Sized>(n_hat: &Tensor<T>, set: TransformSet, rng: &mut R) -> Result<Tensor<T>> {
    if set.is_empty() {
        return Ok(n_hat.clone());
    }
    let s = n_hat.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected NHWC tensor, got {s:?}")));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    if set.rotation && h != w {
        return Err(invalid("transform", format!("rotation needs square images, got {h}x{w}")));
    }
    let len = h * w * c;
    let mut entries = Vec::with_capacity(n * len);
    for b in 0..n {
        let turns = if set.rotation { rng.random_range(0..4) } else { 0 };
        let mut perm: Vec<usize> = (0..c).collect();
        if set.shuffle {
            perm.shuffle(rng);
        }
        let signs: Vec<f64> =
            (0..c).map(|_| if set.inversion && rng.random::<bool>() { -1.0 } else { 1.0 }).collect();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = rotated_source(y, x, h, turns);
                for ch in 0..c {
                    let out = b * len + (y * w + x) * c + ch;
                    let src = b * len + (sy * w + sx) * c + perm[ch];
                    entries.push((out, src, signs[ch]));
                }
            }
        }
    }
    let map = Arc::new(SparseMap::new(n * len, n * len, entries));
    Ok(n_hat.reshape(&[n * len]).sparse(&map, false).reshape(s))
}
