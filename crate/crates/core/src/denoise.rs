//! U-Net denoiser and the pair schemes used to train it.
//!
//! Denoisers work in the `[-0.5, 0.5]` convention; data sources hold
//! `[-1, 1]` batches and are converted on the way in.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{invalid, Error, Result};
use crate::generators::GeneratorBundle;
use crate::image::{ImageBatch, ValueRange};
use crate::kv::KvMap;
use crate::nn::{self, Conv, Init, ParamSet};
use crate::noise::{self, NoiseSpec};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::sparse::reflect;
use crate::tensor::{Real, Tensor};
use crate::training::DIVERGENCE_THRESHOLD;

pub const DENOISER_KIND: &str = "denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    N2c,
    N2n,
    N2v,
    N2s,
    Gn2gc,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::N2c, Scheme::N2n, Scheme::N2v, Scheme::N2s, Scheme::Gn2gc];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::N2c => "n2c",
            Scheme::N2n => "n2n",
            Scheme::N2v => "n2v",
            Scheme::N2s => "n2s",
            Scheme::Gn2gc => "gn2gc",
        }
    }

    /// Blind-spot schemes see only noisy images and score masked sites.
    pub fn is_masked(self) -> bool {
        matches!(self, Scheme::N2v | Scheme::N2s)
    }

    pub fn default_batch_size(self) -> usize {
        if self.is_masked() {
            64
        } else {
            4
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| invalid("scheme", format!("unknown scheme {s:?} (n2c, n2n, n2v, n2s, gn2gc)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserPreset {
    /// Five pooling levels, widths 48/96.
    Standard,
    /// Three pooling levels for 8x8 toy images.
    Tiny,
}

impl FromStr for DenoiserPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(DenoiserPreset::Standard),
            "tiny" => Ok(DenoiserPreset::Tiny),
            _ => Err(invalid("denoiser preset", format!("unknown preset {s:?} (standard, tiny)"))),
        }
    }
}

impl fmt::Display for DenoiserPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenoiserPreset::Standard => "standard",
            DenoiserPreset::Tiny => "tiny",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetArch {
    pub channels: usize,
    /// Number of 2x2 max-pools; inputs must be divisible by `2^depth`.
    pub depth: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    /// Widths of the two convolutions before the output layer.
    pub final_widths: (usize, usize),
    pub leaky_slope: f64,
}

impl UNetArch {
    pub fn preset(p: DenoiserPreset, channels: usize) -> Self {
        match p {
            DenoiserPreset::Standard => {
                UNetArch { channels, depth: 5, enc_width: 48, dec_width: 96, final_widths: (64, 32), leaky_slope: 0.1 }
            }
            DenoiserPreset::Tiny => {
                UNetArch { channels, depth: 3, enc_width: 24, dec_width: 48, final_widths: (32, 16), leaky_slope: 0.1 }
            }
        }
    }

    pub fn multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    pub arch: UNetArch,
    enc: Vec<Conv>,
    bottleneck: Conv,
    /// Decoder stages, deepest first; the last holds three convolutions.
    dec: Vec<Vec<Conv>>,
}

impl DenoiserNet {
    pub fn build<T: Real, R: Rng>(arch: &UNetArch, params: &mut ParamSet<T>, rng: &mut R) -> Result<Self> {
        if arch.depth == 0 || arch.channels == 0 || arch.enc_width == 0 || arch.dec_width == 0 {
            return Err(invalid("denoiser architecture", "depth, channels and widths must be positive"));
        }
        let mut init = Init { params, rng };
        let (c, e, d) = (arch.channels, arch.enc_width, arch.dec_width);
        let mut enc = vec![init.conv("enc0", c, e, 3)];
        for i in 1..=arch.depth {
            enc.push(init.conv(&format!("enc{i}"), e, e, 3));
        }
        let bottleneck = init.conv(&format!("enc{}", arch.depth + 1), e, e, 3);
        let mut dec = Vec::new();
        for level in (1..=arch.depth).rev() {
            let below = if level == arch.depth { e } else { d };
            if level > 1 {
                dec.push(vec![init.conv(&format!("dec{level}a"), below + e, d, 3), init.conv(&format!("dec{level}b"), d, d, 3)]);
            } else {
                let (f1, f2) = arch.final_widths;
                dec.push(vec![
                    init.conv("dec1a", below + c, f1, 3),
                    init.conv("dec1b", f1, f2, 3),
                    init.conv("dec1c", f2, c, 3),
                ]);
            }
        }
        Ok(DenoiserNet { arch: arch.clone(), enc, bottleneck, dec })
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let s = y.shape();
        let m = self.arch.multiple();
        if s.len() != 4 || s[3] != self.arch.channels {
            return Err(Error::Shape(format!("denoiser expects [N, H, W, {}], got {s:?}", self.arch.channels)));
        }
        if s[1] % m != 0 || s[2] % m != 0 || s[1] == 0 || s[2] == 0 {
            return Err(invalid("denoiser input", format!("spatial dims {}x{} must be positive multiples of {m}", s[1], s[2])));
        }
        let slope = T::of(self.arch.leaky_slope);
        let act = |t: Tensor<T>| t.leaky_relu(slope);
        let mut skips = vec![y.clone()];
        let mut h = act(self.enc[0].forward(p, y));
        for (i, conv) in self.enc[1..].iter().enumerate() {
            h = nn::maxpool2(&act(conv.forward(p, &h)));
            if i + 1 < self.arch.depth {
                skips.push(h.clone());
            }
        }
        h = act(self.bottleneck.forward(p, &h));
        for stage in &self.dec {
            let skip = skips.pop().expect("one skip per level");
            h = nn::concat_last(&nn::upsample2(&h), &skip);
            let last = stage.len() - 1;
            for (j, conv) in stage.iter().enumerate() {
                h = conv.forward(p, &h);
                if j < last || stage.len() == 2 {
                    h = act(h);
                }
            }
        }
        Ok(h)
    }
}

/// Network plus weights.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: DenoiserNet,
    pub params: ParamSet<f32>,
}

impl Denoiser {
    pub fn new<R: Rng>(arch: &UNetArch, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let net = DenoiserNet::build(arch, &mut params, rng)?;
        Ok(Denoiser { net, params })
    }

    /// Denoise `[-0.5, 0.5]` images of any size, reflection-padding up to the
    /// next valid size and cropping back.
    pub fn denoise(&self, y: &ImageBatch) -> Result<ImageBatch> {
        if y.range() != ValueRange::HalfUnit {
            return Err(Error::Precondition("denoiser input must use the [-0.5, 0.5] range".into()));
        }
        let [n, h, w, c] = y.shape();
        let m = self.net.arch.multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut out = Vec::with_capacity(y.data().len());
        for start in (0..n).step_by(16) {
            let idx: Vec<usize> = (start..(start + 16).min(n)).collect();
            let chunk = pad_reflect(&y.select(&idx), ph, pw);
            let pred = self.net.forward(&self.params, &chunk.to_tensor::<f32>())?;
            for b in 0..idx.len() {
                for yy in 0..h {
                    let row = ((b * ph + yy) * pw) * c;
                    out.extend_from_slice(&pred.data()[row..row + w * c]);
                }
            }
        }
        ImageBatch::new(out, [n, h, w, c], ValueRange::HalfUnit)
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(DENOISER_KIND, serde_json::json!({ "arch": self.net.arch, "run": meta }));
        ck.put_params("net", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(DENOISER_KIND)?;
        let arch: UNetArch = serde_json::from_value(ck.meta["arch"].clone())?;
        let mut d = Denoiser::new(&arch, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.load_params("net", &mut d.params)?;
        Ok(d)
    }
}

fn pad_reflect(b: &ImageBatch, ph: usize, pw: usize) -> ImageBatch {
    let [n, h, w, c] = b.shape();
    if (ph, pw) == (h, w) {
        return b.clone();
    }
    let mut data = Vec::with_capacity(n * ph * pw * c);
    for i in 0..n {
        let img = b.image(i);
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize, w);
                data.extend_from_slice(&img[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
            }
        }
    }
    ImageBatch::new(data, [n, ph, pw, c], b.range()).expect("padding keeps values finite")
}

/// Blind-spot masking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub num_pixels: usize,
    /// Side of the square neighbourhood N2V draws replacements from.
    pub kernel: usize,
    /// N2S overwrite range.
    pub overwrite_lo: f32,
    pub overwrite_hi: f32,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { num_pixels: 64, kernel: 5, overwrite_lo: -0.5, overwrite_hi: 0.5 }
    }
}

/// Replace `num_pixels` sites per image (chosen without replacement).
///
/// Returns the masked batch and, per image, the masked pixel indices
/// `y * W + x` in ascending order.
pub fn mask_pixels<R: Rng + ?Sized>(y: &ImageBatch, scheme: Scheme, cfg: &MaskConfig, rng: &mut R) -> Result<(ImageBatch, Vec<Vec<usize>>)> {
    if !scheme.is_masked() {
        return Err(invalid("scheme", format!("{scheme} does not mask pixels")));
    }
    let [n, h, w, c] = y.shape();
    let k = cfg.kernel;
    if k % 2 == 0 || k < 3 {
        return Err(invalid("mask kernel", format!("kernel {k} must be odd and >= 3")));
    }
    if h < k || w < k {
        return Err(invalid("mask", format!("image {h}x{w} is smaller than the {k}x{k} kernel")));
    }
    if cfg.num_pixels == 0 || cfg.num_pixels > h * w {
        return Err(invalid("mask", format!("cannot select {} of {} pixels", cfg.num_pixels, h * w)));
    }
    if !(cfg.overwrite_lo < cfg.overwrite_hi) {
        return Err(invalid("mask", "overwrite range is empty"));
    }
    let r = (k / 2) as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).filter(|&o| o != (0, 0)).collect();
    let mut data = y.data().to_vec();
    let mut sites = Vec::with_capacity(n);
    for i in 0..n {
        let src = y.image(i);
        let dst = &mut data[i * h * w * c..(i + 1) * h * w * c];
        let mut chosen = index::sample(rng, h * w, cfg.num_pixels).into_vec();
        chosen.sort_unstable();
        for &p in &chosen {
            let (py, px) = ((p / w) as isize, (p % w) as isize);
            let out = &mut dst[p * c..(p + 1) * c];
            if scheme == Scheme::N2v {
                let (dy, dx) = offsets[rng.random_range(0..offsets.len())];
                let q = reflect(py + dy, h) * w + reflect(px + dx, w);
                out.copy_from_slice(&src[q * c..(q + 1) * c]);
            } else {
                for v in out.iter_mut() {
                    *v = rng.random_range(cfg.overwrite_lo..cfg.overwrite_hi);
                }
            }
        }
        sites.push(chosen);
    }
    Ok((ImageBatch::new(data, y.shape(), y.range())?, sites))
}

/// Supplies clean images and matching noise, both `[-1, 1]`-scaled, for
/// synthetic pair training.
pub trait PairSampler {
    fn sample_clean_noise(&self, n: usize, rng: &mut dyn RngCore) -> Result<(ImageBatch, ImageBatch)>;
}

impl PairSampler for GeneratorBundle<f32> {
    fn sample_clean_noise(&self, n: usize, rng: &mut dyn RngCore) -> Result<(ImageBatch, ImageBatch)> {
        let (x, noise) = self.sample_pairs(n, rng)?;
        Ok((ImageBatch::from_tensor(&x, ValueRange::SymmetricUnit)?, ImageBatch::from_tensor(&noise, ValueRange::SymmetricUnit)?))
    }
}

/// Training material for the denoiser. Image batches are `[-1, 1]`.
///
/// With a noise spec, noisy inputs are drawn fresh from `clean` every
/// step; otherwise `noisy` holds fixed observations, and `noisy_pair` a
/// second fixed realization aligned with it.
#[derive(Clone, Copy, Default)]
pub struct DenoiseData<'a> {
    pub clean: Option<&'a ImageBatch>,
    pub noisy: Option<&'a ImageBatch>,
    pub noisy_pair: Option<&'a ImageBatch>,
    pub noise: Option<&'a NoiseSpec>,
    pub sampler: Option<&'a dyn PairSampler>,
}

/// One training batch in the `[-0.5, 0.5]` convention.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub input: ImageBatch,
    pub target: ImageBatch,
    /// Per pixel site, `1` where the loss is evaluated.
    pub loss_mask: Vec<u8>,
}

impl PairBatch {
    fn full(input: ImageBatch, target: ImageBatch) -> Self {
        let [n, h, w, _] = input.shape();
        PairBatch { input, target, loss_mask: vec![1; n * h * w] }
    }
}

fn half(b: &ImageBatch) -> ImageBatch {
    b.to_range(ValueRange::HalfUnit)
}

fn draw_indices<R: Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(invalid("denoise data", "empty image set"));
    }
    Ok((0..batch).map(|_| rng.random_range(0..len)).collect())
}

pub fn make_pairs<R: Rng>(scheme: Scheme, data: &DenoiseData, batch: usize, mask: &MaskConfig, rng: &mut R) -> Result<PairBatch> {
    let missing = |what: &str| invalid("denoise data", format!("{scheme} needs {what}"));
    match scheme {
        Scheme::N2c => {
            let clean = data.clean.ok_or_else(|| missing("clean images"))?;
            let idx = draw_indices(clean.len(), batch, rng)?;
            let x = clean.select(&idx);
            let y = match (data.noise, data.noisy) {
                (Some(spec), _) => noise::sample_noise(spec, &x, rng)?.1,
                (None, Some(noisy)) if noisy.len() == clean.len() => noisy.select(&idx),
                _ => return Err(missing("a noise spec or noisy images aligned with the clean set")),
            };
            Ok(PairBatch::full(half(&y), half(&x)))
        }
        Scheme::N2n if data.noisy.is_some() && data.noisy_pair.is_some() => {
            let (a, b) = (data.noisy.expect("checked"), data.noisy_pair.expect("checked"));
            if a.len() != b.len() {
                return Err(missing("two aligned noisy realizations"));
            }
            let idx = draw_indices(a.len(), batch, rng)?;
            Ok(PairBatch::full(half(&a.select(&idx)), half(&b.select(&idx))))
        }
        Scheme::N2n => {
            let clean = data.clean.ok_or_else(|| missing("clean images"))?;
            let spec = data.noise.ok_or_else(|| missing("a noise spec for independent realizations"))?;
            let x = clean.select(&draw_indices(clean.len(), batch, rng)?);
            let y1 = noise::sample_noise(spec, &x, rng)?.1;
            let y2 = noise::sample_noise(spec, &x, rng)?.1;
            Ok(PairBatch::full(half(&y1), half(&y2)))
        }
        Scheme::N2v | Scheme::N2s => {
            let y = match (data.noisy, data.clean, data.noise) {
                (Some(noisy), _, _) => noisy.select(&draw_indices(noisy.len(), batch, rng)?),
                (None, Some(clean), Some(spec)) => {
                    noise::sample_noise(spec, &clean.select(&draw_indices(clean.len(), batch, rng)?), rng)?.1
                }
                _ => return Err(missing("noisy images")),
            };
            let y = half(&y);
            let (masked, sites) = mask_pixels(&y, scheme, mask, rng)?;
            let [n, h, w, _] = y.shape();
            let mut loss_mask = vec![0u8; n * h * w];
            for (i, s) in sites.iter().enumerate() {
                for &p in s {
                    loss_mask[i * h * w + p] = 1;
                }
            }
            Ok(PairBatch { input: masked, target: y, loss_mask })
        }
        Scheme::Gn2gc => {
            let sampler = data.sampler.ok_or_else(|| missing("a trained generator bundle"))?;
            let (x, n) = sampler.sample_clean_noise(batch, rng)?;
            if x.shape() != n.shape() {
                return Err(Error::Shape("sampler returned mismatched clean and noise batches".into()));
            }
            let y: Vec<f32> = x.data().iter().zip(n.data()).map(|(a, b)| a + b).collect();
            let y = ImageBatch::new(y, x.shape(), ValueRange::SymmetricUnit)?;
            Ok(PairBatch::full(half(&y), half(&x)))
        }
    }
}

/// Mean squared error over the channels of every pixel site with a
/// non-zero mask entry.
pub fn masked_l2<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, loss_mask: &[u8]) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let sites = loss_mask.len();
    if sites == 0 || pred.numel() % sites != 0 {
        return Err(Error::Shape(format!("mask of {sites} sites does not tile {} values", pred.numel())));
    }
    let c = pred.numel() / sites;
    let count = loss_mask.iter().filter(|&&m| m != 0).count() * c;
    if count == 0 {
        return Err(invalid("loss mask", "no site selected"));
    }
    let weights: Arc<[T]> = loss_mask.iter().flat_map(|&m| std::iter::repeat_n(if m != 0 { T::one() } else { T::zero() }, c)).collect();
    Ok(pred.sub(target).square().mul_const(weights).sum().scale(T::of(1.0 / count as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub preset: DenoiserPreset,
    pub iterations: u64,
    /// `0` selects the scheme default.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fraction of training over which the rate ramps linearly to zero.
    pub ramp_fraction: f64,
    pub mask: MaskConfig,
    pub seed: u64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            preset: DenoiserPreset::Standard,
            iterations: 2000,
            batch_size: 0,
            adam: AdamConfig::DENOISER,
            ramp_fraction: 0.3,
            mask: MaskConfig::default(),
            seed: 0,
        }
    }
}

impl DenoiseConfig {
    pub fn batch_for(&self, scheme: Scheme) -> usize {
        if self.batch_size == 0 {
            scheme.default_batch_size()
        } else {
            self.batch_size
        }
    }

    /// Constant rate, then a linear ramp to zero over the final
    /// `ramp_fraction` of training.
    pub fn learning_rate(&self, iteration: u64) -> f64 {
        let t = iteration as f64 / self.iterations.max(1) as f64;
        let start = 1.0 - self.ramp_fraction;
        if t <= start || self.ramp_fraction <= 0.0 {
            self.adam.lr
        } else {
            self.adam.lr * ((1.0 - t) / self.ramp_fraction).max(0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return Err(invalid("denoise config", format!("ramp_fraction {} must lie in [0, 1]", self.ramp_fraction)));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(invalid("denoise config", "learning rate must be >= 0"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("preset", self.preset);
        m.insert("iterations", self.iterations);
        m.insert("batch_size", self.batch_size);
        m.insert("adam.lr", self.adam.lr);
        m.insert("adam.beta1", self.adam.beta1);
        m.insert("adam.beta2", self.adam.beta2);
        m.insert("adam.eps", self.adam.eps);
        m.insert("ramp_fraction", self.ramp_fraction);
        m.insert("mask.num_pixels", self.mask.num_pixels);
        m.insert("mask.kernel", self.mask.kernel);
        m.insert("mask.overwrite_lo", self.mask.overwrite_lo);
        m.insert("mask.overwrite_hi", self.mask.overwrite_hi);
        m.insert("seed", self.seed);
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = DenoiseConfig::default();
        Ok(DenoiseConfig {
            preset: m.parse_or("preset", d.preset)?,
            iterations: m.parse_or("iterations", d.iterations)?,
            batch_size: m.parse_or("batch_size", d.batch_size)?,
            adam: AdamConfig {
                lr: m.parse_or("adam.lr", d.adam.lr)?,
                beta1: m.parse_or("adam.beta1", d.adam.beta1)?,
                beta2: m.parse_or("adam.beta2", d.adam.beta2)?,
                eps: m.parse_or("adam.eps", d.adam.eps)?,
            },
            ramp_fraction: m.parse_or("ramp_fraction", d.ramp_fraction)?,
            mask: MaskConfig {
                num_pixels: m.parse_or("mask.num_pixels", d.mask.num_pixels)?,
                kernel: m.parse_or("mask.kernel", d.mask.kernel)?,
                overwrite_lo: m.parse_or("mask.overwrite_lo", d.mask.overwrite_lo)?,
                overwrite_hi: m.parse_or("mask.overwrite_hi", d.mask.overwrite_hi)?,
            },
            seed: m.parse_or("seed", d.seed)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseMetrics {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub diverged: bool,
}

pub struct DenoiserTrainer {
    pub denoiser: Denoiser,
    pub scheme: Scheme,
    pub config: DenoiseConfig,
    opt: Adam,
    pub iteration: u64,
    rng: ChaCha8Rng,
}

impl DenoiserTrainer {
    pub fn new(scheme: Scheme, channels: usize, config: DenoiseConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let denoiser = Denoiser::new(&UNetArch::preset(config.preset, channels), &mut init_rng)?;
        let opt = Adam::new(config.adam, &denoiser.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xd3_0153);
        Ok(DenoiserTrainer { denoiser, scheme, config, opt, iteration: 0, rng })
    }

    pub fn step(&mut self, data: &DenoiseData) -> Result<DenoiseMetrics> {
        let batch = make_pairs(self.scheme, data, self.config.batch_for(self.scheme), &self.config.mask, &mut self.rng)?;
        let lr = self.config.learning_rate(self.iteration);
        let pred = self.denoiser.net.forward(&self.denoiser.params, &batch.input.to_tensor::<f32>())?;
        let loss = masked_l2(&pred, &batch.target.to_tensor(), &batch.loss_mask)?;
        let value = loss.item() as f64;
        self.iteration += 1;
        let diverged = !value.is_finite() || value.abs() > DIVERGENCE_THRESHOLD;
        if !diverged {
            let before = (self.denoiser.params.clone(), self.opt.clone());
            let grads = self.denoiser.params.grads(&loss);
            self.opt.update(&mut self.denoiser.params, &grads, lr);
            if !self.denoiser.params.all_finite() {
                (self.denoiser.params, self.opt) = before;
                return Ok(DenoiseMetrics { iteration: self.iteration, loss: value, lr, diverged: true });
            }
        }
        Ok(DenoiseMetrics { iteration: self.iteration, loss: value, lr, diverged })
    }

    /// Run the remaining iterations, returning one metrics record per step.
    pub fn train(&mut self, data: &DenoiseData) -> Result<Vec<DenoiseMetrics>> {
        let mut log = Vec::new();
        while self.iteration < self.config.iterations {
            log.push(self.step(data)?);
        }
        Ok(log)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "scheme": self.scheme,
            "config": self.config,
            "iteration": self.iteration,
            "rng": RngState::capture(&self.rng),
        });
        let mut ck = self.denoiser.to_checkpoint(meta);
        ck.put_adam("opt", &self.opt);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let denoiser = Denoiser::from_checkpoint(ck)?;
        let run = &ck.meta["run"];
        let scheme: Scheme = serde_json::from_value(run["scheme"].clone())?;
        let config: DenoiseConfig = serde_json::from_value(run["config"].clone())?;
        let mut t = DenoiserTrainer::new(scheme, denoiser.net.arch.channels, config)?;
        t.denoiser = denoiser;
        ck.load_adam("opt", &mut t.opt)?;
        t.iteration = run["iteration"].as_u64().ok_or_else(|| Error::Checkpoint("missing iteration".into()))?;
        t.rng = serde_json::from_value::<RngState>(run["rng"].clone())?.restore();
        Ok(t)
    }
}

/// Train a fresh denoiser for `config.iterations` steps.
pub fn train_denoiser(scheme: Scheme, channels: usize, data: &DenoiseData, config: DenoiseConfig) -> Result<(Denoiser, Vec<DenoiseMetrics>)> {
    let mut t = DenoiserTrainer::new(scheme, channels, config)?;
    let log = t.train(data)?;
    if log.iter().any(|m| m.diverged) {
        let at = log.iter().find(|m| m.diverged).map_or(0, |m| m.iteration);
        return Err(Error::Diverged { iteration: at, reason: "denoiser loss out of bounds".into() });
    }
    Ok((t.denoiser, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseVariant;
    use crate::tensor::grad;
    use proptest::prelude::{prop_assert_eq, prop_assume, proptest, ProptestConfig};

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn ramp_batch(n: usize, h: usize, w: usize, c: usize, range: ValueRange) -> ImageBatch {
        let (lo, hi) = range.bounds();
        let len = n * h * w * c;
        let data = (0..len).map(|i| lo + (hi - lo) * ((i * 37 % 101) as f32 / 100.0)).collect();
        ImageBatch::new(data, [n, h, w, c], range).unwrap()
    }

    #[test]
    fn standard_net_keeps_shape_and_is_deterministic() {
        let d = Denoiser::new(&UNetArch::preset(DenoiserPreset::Standard, 3), &mut rng(1)).unwrap();
        let y = ramp_batch(4, 32, 32, 3, ValueRange::HalfUnit).to_tensor::<f32>();
        let a = d.net.forward(&d.params, &y).unwrap();
        assert_eq!(a.shape(), &[4, 32, 32, 3]);
        assert!(a.is_finite());
        assert_eq!(a.data(), d.net.forward(&d.params, &y).unwrap().data());
    }

    #[test]
    fn indivisible_input_is_rejected_but_denoise_pads() {
        let d = Denoiser::new(&UNetArch::preset(DenoiserPreset::Tiny, 3), &mut rng(2)).unwrap();
        let y = ramp_batch(2, 12, 10, 3, ValueRange::HalfUnit);
        let err = d.net.forward(&d.params, &y.to_tensor::<f32>()).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
        let out = d.denoise(&y).unwrap();
        assert_eq!(out.shape(), [2, 12, 10, 3]);
        assert!(d.denoise(&y.to_range(ValueRange::SymmetricUnit)).is_err());
    }

    #[test]
    fn tiny_net_parameter_layout() {
        let mut p = ParamSet::<f64>::new();
        let net = DenoiserNet::build(&UNetArch::preset(DenoiserPreset::Tiny, 3), &mut p, &mut rng(0)).unwrap();
        // enc0..enc3 + bottleneck + 2 * 2 decoder convs + 3 final convs, weight and bias each
        assert_eq!(p.len(), 2 * (5 + 4 + 3));
        assert_eq!(net.dec.len(), 3);
        let last = p.names().iter().position(|n| n == "dec1c.weight").unwrap();
        assert_eq!(p.get(last).shape(), &[9 * 16, 3]);
        let first_dec = p.names().iter().position(|n| n == "dec3a.weight").unwrap();
        assert_eq!(p.get(first_dec).shape(), &[9 * 48, 48]);
    }

    fn neighbourhood(img: &[f32], h: usize, w: usize, c: usize, p: usize, k: usize) -> Vec<Vec<f32>> {
        // enumerate with explicit mirror arithmetic
        let mirror = |v: isize, n: isize| -> usize {
            let v = if v < 0 { -v } else { v };
            (if v >= n { 2 * (n - 1) - v } else { v }) as usize
        };
        let (py, px) = ((p / w) as isize, (p % w) as isize);
        let r = (k / 2) as isize;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if (dy, dx) == (0, 0) {
                    continue;
                }
                let q = mirror(py + dy, h as isize) * w + mirror(px + dx, w as isize);
                out.push(img[q * c..(q + 1) * c].to_vec());
            }
        }
        out
    }

    #[test]
    fn n2v_mask_contract() {
        let y = ramp_batch(3, 9, 11, 3, ValueRange::HalfUnit);
        let cfg = MaskConfig::default();
        let (m, sites) = mask_pixels(&y, Scheme::N2v, &cfg, &mut rng(4)).unwrap();
        for i in 0..3 {
            assert_eq!(sites[i].len(), 64);
            assert!(sites[i].windows(2).all(|p| p[0] < p[1]));
            for p in 0..99 {
                let got = &m.image(i)[p * 3..p * 3 + 3];
                if sites[i].binary_search(&p).is_err() {
                    assert_eq!(got, &y.image(i)[p * 3..p * 3 + 3]);
                } else {
                    assert!(neighbourhood(y.image(i), 9, 11, 3, p, 5).iter().any(|v| v.as_slice() == got));
                }
            }
        }
    }

    #[test]
    fn n2s_overwrites_inside_range_and_rejects_small_images() {
        let y = ramp_batch(2, 8, 8, 1, ValueRange::HalfUnit);
        let cfg = MaskConfig { num_pixels: 10, ..MaskConfig::default() };
        let (m, sites) = mask_pixels(&y, Scheme::N2s, &cfg, &mut rng(5)).unwrap();
        for (i, s) in sites.iter().enumerate() {
            assert_eq!(s.len(), 10);
            for &p in s {
                assert!((-0.5..0.5).contains(&m.image(i)[p]));
            }
        }
        assert!(mask_pixels(&ramp_batch(1, 4, 8, 1, ValueRange::HalfUnit), Scheme::N2v, &cfg, &mut rng(0)).is_err());
        assert!(mask_pixels(&y, Scheme::N2v, &MaskConfig::default(), &mut rng(0)).is_ok());
        assert!(mask_pixels(&y, Scheme::N2c, &cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn pair_constructions() {
        let clean = ramp_batch(5, 8, 8, 3, ValueRange::SymmetricUnit);
        let zero = NoiseSpec::gaussian(0.0);
        let data = DenoiseData { clean: Some(&clean), noise: Some(&zero), ..Default::default() };
        let n2n = make_pairs(Scheme::N2n, &data, 4, &MaskConfig::default(), &mut rng(6)).unwrap();
        assert_eq!(n2n.input, n2n.target);
        let spec = NoiseSpec::preset(NoiseVariant::A);
        let noisy = noise::sample_noise(&spec, &clean, &mut rng(1)).unwrap().1;
        let frozen = DenoiseData { clean: Some(&clean), noisy: Some(&noisy), ..Default::default() };
        let n2c = make_pairs(Scheme::N2c, &frozen, 4, &MaskConfig::default(), &mut rng(7)).unwrap();
        // each target is one of the clean images, converted exactly
        for i in 0..4 {
            let t = n2c.target.image(i);
            let j = (0..5).find(|&j| clean.image(j).iter().zip(t).all(|(a, b)| a * 0.5 == *b)).expect("target from clean set");
            assert!(noisy.image(j).iter().zip(n2c.input.image(i)).all(|(a, b)| a * 0.5 == *b));
        }
        assert!(n2c.loss_mask.iter().all(|&m| m == 1));
        assert!(make_pairs(Scheme::N2c, &DenoiseData::default(), 4, &MaskConfig::default(), &mut rng(0)).is_err());
        assert!(make_pairs(Scheme::Gn2gc, &data, 4, &MaskConfig::default(), &mut rng(0)).is_err());
        assert!(make_pairs(Scheme::N2n, &frozen, 4, &MaskConfig::default(), &mut rng(0)).is_err());
    }

    struct FixedSampler(ImageBatch, ImageBatch);

    impl PairSampler for FixedSampler {
        fn sample_clean_noise(&self, n: usize, _rng: &mut dyn RngCore) -> Result<(ImageBatch, ImageBatch)> {
            let idx: Vec<usize> = (0..n).map(|i| i % self.0.len()).collect();
            Ok((self.0.select(&idx), self.1.select(&idx)))
        }
    }

    #[test]
    fn gn2gc_input_minus_target_is_the_noise() {
        let clean = ramp_batch(3, 8, 8, 3, ValueRange::SymmetricUnit);
        let (noise, _) = noise::sample_noise(&NoiseSpec::preset(NoiseVariant::A), &clean, &mut rng(8)).unwrap();
        let sampler = FixedSampler(clean, noise.clone());
        let data = DenoiseData { sampler: Some(&sampler), ..Default::default() };
        let p = make_pairs(Scheme::Gn2gc, &data, 3, &MaskConfig::default(), &mut rng(0)).unwrap();
        for (i, (a, b)) in p.input.data().iter().zip(p.target.data()).enumerate() {
            assert!(((a - b) * 2.0 - noise.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn schemes_agree_without_noise() {
        let clean = ramp_batch(1, 8, 8, 3, ValueRange::SymmetricUnit);
        let zero = NoiseSpec::gaussian(0.0);
        let zeros = ImageBatch::zeros(clean.shape(), ValueRange::SymmetricUnit);
        let sampler = FixedSampler(clean.clone(), zeros);
        let data = DenoiseData { clean: Some(&clean), noise: Some(&zero), sampler: Some(&sampler), ..Default::default() };
        let d = Denoiser::new(&UNetArch::preset(DenoiserPreset::Tiny, 3), &mut rng(9)).unwrap();
        let losses: Vec<f32> = [Scheme::N2c, Scheme::N2n, Scheme::Gn2gc]
            .iter()
            .map(|&s| {
                let b = make_pairs(s, &data, 2, &MaskConfig::default(), &mut rng(1)).unwrap();
                let pred = d.net.forward(&d.params, &b.input.to_tensor::<f32>()).unwrap();
                masked_l2(&pred, &b.target.to_tensor(), &b.loss_mask).unwrap().item()
            })
            .collect();
        assert_eq!(losses[0], losses[1]);
        assert_eq!(losses[0], losses[2]);
    }

    #[test]
    fn ramp_reaches_half_rate_at_85_percent() {
        let c = DenoiseConfig { iterations: 1000, ..DenoiseConfig::default() };
        assert_eq!(c.learning_rate(0), 3e-4);
        assert_eq!(c.learning_rate(700), 3e-4);
        assert!((c.learning_rate(850) - 1.5e-4).abs() < 1e-15);
        assert_eq!(c.learning_rate(1000), 0.0);
    }

    #[test]
    fn masked_loss_gradient_vanishes_off_mask() {
        let pred = Tensor::<f64>::param((0..12).map(|i| i as f64 * 0.1).collect(), &[1, 2, 2, 3]);
        let target = Tensor::<f64>::zeros(&[1, 2, 2, 3]);
        let mask = [0u8, 1, 0, 1];
        let loss = masked_l2(&pred, &target, &mask).unwrap();
        let g = grad(&loss, &[&pred], false)[0].clone().unwrap();
        for (i, v) in g.data().iter().enumerate() {
            if mask[i / 3] == 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert!((v - 2.0 * pred.data()[i] / 6.0).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn unmasked_targets_do_not_affect_loss(seed in 0u64..1000, site in 0usize..16, delta in -1.0f64..1.0) {
            let mut r = rng(seed);
            let mask: Vec<u8> = (0..16).map(|_| r.random_range(0..2u8)).collect();
            prop_assume!(mask.iter().any(|&m| m == 1) && mask[site] == 0);
            let pred = nn::randn::<f64, _>(&[1, 4, 4, 2], &mut r);
            let target: Vec<f64> = (0..32).map(|_| r.random_range(-0.5..0.5)).collect();
            let mut moved = target.clone();
            moved[site * 2] += delta;
            let a = masked_l2(&pred, &Tensor::from_vec(target, &[1, 4, 4, 2]), &mask).unwrap().item();
            let b = masked_l2(&pred, &Tensor::from_vec(moved, &[1, 4, 4, 2]), &mask).unwrap().item();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let clean = ramp_batch(6, 8, 8, 3, ValueRange::SymmetricUnit);
        let spec = NoiseSpec::preset(NoiseVariant::A);
        let data = DenoiseData { clean: Some(&clean), noise: Some(&spec), ..Default::default() };
        let cfg = DenoiseConfig { preset: DenoiserPreset::Tiny, iterations: 6, ..DenoiseConfig::default() };
        let mut a = DenoiserTrainer::new(Scheme::N2n, 3, cfg.clone()).unwrap();
        for _ in 0..3 {
            a.step(&data).unwrap();
        }
        let ck = Checkpoint::from_bytes(&a.to_checkpoint().to_bytes().unwrap()).unwrap();
        let mut b = DenoiserTrainer::from_checkpoint(&ck).unwrap();
        assert_eq!(a.train(&data).unwrap(), b.train(&data).unwrap());
        assert!(Denoiser::from_checkpoint(&Checkpoint::new("generator_bundle", serde_json::Value::Null)).is_err());
    }
}
