//! Objectives, regularizers and the alternating update loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{invalid, Error, Result};
use crate::generators::{
    compose_observation, Discriminator, GeneratorBundle, LatentBatch, LatentRole, NoiseDraw, Variant, Weights, BUNDLE_KIND,
};
use crate::image::{ImageBatch, ValueRange};
use crate::kv::KvMap;
use crate::nn::{self, ParamSet};
use crate::noise::{self, NoiseSpec};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::sparse::Kernel2d;
use crate::tensor::{grad, Real, Tensor};

/// Any loss above this magnitude counts as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    None,
    Blur,
    Blurvh,
}

impl FilterMode {
    /// Discriminator input channels for images with `c` channels.
    pub fn out_channels(self, c: usize) -> usize {
        if self == FilterMode::Blurvh {
            2 * c
        } else {
            c
        }
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FilterMode::None),
            "blur" => Ok(FilterMode::Blur),
            "blurvh" => Ok(FilterMode::Blurvh),
            _ => Err(Error::Config(format!("unknown filter mode {s:?} (none, blur, blurvh)"))),
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::None => "none",
            FilterMode::Blur => "blur",
            FilterMode::Blurvh => "blurvh",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub r1_gamma: f64,
    pub ds_lambda: f64,
    /// Upper bound of the DS ratio; `<= 0` disables the bound.
    pub ds_tau: f64,
    pub filter_mode: FilterMode,
    pub ema_decay: f64,
    pub seed: u64,
    /// Permit Poisson-family data without the blurvh filter.
    pub allow_unfiltered_poisson: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 64,
            adam: AdamConfig::GAN,
            r1_gamma: 10.0,
            ds_lambda: 0.02,
            ds_tau: 0.0,
            filter_mode: FilterMode::None,
            ema_decay: 0.999,
            seed: 0,
            allow_unfiltered_poisson: false,
        }
    }
}

impl TrainConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("iterations", self.iterations);
        m.insert("batch_size", self.batch_size);
        m.insert("adam.lr", self.adam.lr);
        m.insert("adam.beta1", self.adam.beta1);
        m.insert("adam.beta2", self.adam.beta2);
        m.insert("adam.eps", self.adam.eps);
        m.insert("r1_gamma", self.r1_gamma);
        m.insert("ds_lambda", self.ds_lambda);
        m.insert("ds_tau", self.ds_tau);
        m.insert("filter_mode", self.filter_mode);
        m.insert("ema_decay", self.ema_decay);
        m.insert("seed", self.seed);
        m.insert("allow_unfiltered_poisson", self.allow_unfiltered_poisson);
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            iterations: m.parse_or("iterations", d.iterations)?,
            batch_size: m.parse_or("batch_size", d.batch_size)?,
            adam: AdamConfig {
                lr: m.parse_or("adam.lr", d.adam.lr)?,
                beta1: m.parse_or("adam.beta1", d.adam.beta1)?,
                beta2: m.parse_or("adam.beta2", d.adam.beta2)?,
                eps: m.parse_or("adam.eps", d.adam.eps)?,
            },
            r1_gamma: m.parse_or("r1_gamma", d.r1_gamma)?,
            ds_lambda: m.parse_or("ds_lambda", d.ds_lambda)?,
            ds_tau: m.parse_or("ds_tau", d.ds_tau)?,
            filter_mode: m.parse_or("filter_mode", d.filter_mode)?,
            ema_decay: m.parse_or("ema_decay", d.ema_decay)?,
            seed: m.parse_or("seed", d.seed)?,
            allow_unfiltered_poisson: m.parse_or("allow_unfiltered_poisson", d.allow_unfiltered_poisson)?,
        })
    }

    /// `data_noise` is the corruption of the training data, when known.
    pub fn validate(&self, variant: Variant, data_noise: Option<&NoiseSpec>) -> Result<()> {
        let bad = |r: String| Err(invalid("train config", r));
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size {} must be even and >= 2", self.batch_size));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("learning rate {} must be >= 0", self.adam.lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.r1_gamma >= 0.0) || !(self.ds_lambda >= 0.0) || !self.ds_tau.is_finite() {
            return bad("r1_gamma and ds_lambda must be >= 0, ds_tau finite".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} must lie in [0, 1)", self.ema_decay));
        }
        let poisson = data_noise.is_some_and(|s| {
            s.variant.is_poisson_family() || s.mixture.iter().any(|c| c.spec.variant.is_poisson_family())
        });
        if poisson && variant != Variant::Gan && self.filter_mode != FilterMode::Blurvh && !self.allow_unfiltered_poisson {
            return bad("Poisson-family data needs filter_mode = blurvh (or allow_unfiltered_poisson = true)".into());
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub iteration: u64,
    /// Update order inside the step.
    pub order: String,
    pub loss_g: f64,
    pub loss_d: f64,
    pub r1: f64,
    pub ds: f64,
    pub diverged: bool,
    /// Seconds spent in the step; kept out of the serialized stream so
    /// reruns produce identical logs.
    #[serde(skip)]
    pub wall_clock: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<serde_json::Value>,
}

/// Non-saturating losses `(loss_d, loss_g)`, averaged over the batch.
pub fn gan_losses<T: Real>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if !d_real.is_finite() || !d_fake.is_finite() {
        return Err(Error::Diverged { iteration: 0, reason: "non-finite discriminator logits".into() });
    }
    let loss_d = d_real.neg().softplus().mean().add(&d_fake.softplus().mean());
    let loss_g = d_fake.neg().softplus().mean();
    Ok((loss_d, loss_g))
}

/// `(gamma / 2) * mean_i ||grad_y D(y_i)||^2` at `y_real`, as a tracked
/// scalar, plus the logits `D(y_real)`.
pub fn r1_penalty<T: Real>(disc: impl Fn(&Tensor<T>) -> Tensor<T>, y_real: &Tensor<T>, gamma: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let y = y_real.as_leaf();
    let logits = disc(&y);
    let n = y.shape()[0];
    let g = match grad(&logits.sum(), &[&y], true).pop().flatten() {
        Some(g) => g,
        // D ignores its input
        None => return Ok((Tensor::scalar(T::zero()), logits)),
    };
    let pen = g.square().sum().scale(T::of(gamma / (2.0 * n as f64)));
    Ok((pen, logits))
}

/// Diversity-sensitive term to be maximized by the noise generator.
///
/// Pairs row `i` of `(out1, z1)` with row `i` of `(out2, z2)`. The ratio is
/// mean |out1 - out2| over mean |z1 - z2| per pair, bounded by `tau` when
/// `tau > 0`; pairs with identical latents are skipped.
pub fn ds_regularizer<T: Real>(out1: &Tensor<T>, out2: &Tensor<T>, z1: &Tensor<T>, z2: &Tensor<T>, lambda: f64, tau: f64) -> Result<Tensor<T>> {
    if out1.shape() != out2.shape() || z1.shape() != z2.shape() || out1.shape()[0] != z1.shape()[0] {
        return Err(Error::Shape("DS pairs must have matching shapes".into()));
    }
    let n = out1.shape()[0];
    let per_out = out1.numel() / n;
    let per_z = z1.numel() / n;
    let (a, b) = (z1.data(), z2.data());
    let mut inv = Vec::with_capacity(n);
    for i in 0..n {
        let dz: f64 = (0..per_z).map(|j| (a[i * per_z + j] - b[i * per_z + j]).abs().f64()).sum::<f64>() / per_z as f64;
        inv.push(if dz > 0.0 { T::of(1.0 / dz) } else { T::zero() });
    }
    let valid = inv.iter().filter(|v| **v != T::zero()).count();
    if valid == 0 {
        return Ok(Tensor::scalar(T::zero()));
    }
    let dist = out1.sub(out2).abs().sum_per_sample().scale(T::of(1.0 / per_out as f64));
    let mut ratio = dist.mul_const(inv.clone().into());
    if tau > 0.0 {
        ratio = ratio.clamp_max(T::of(tau));
        // skipped pairs have ratio 0 < tau, so the clamp leaves them at 0
    }
    Ok(ratio.sum().scale(T::of(lambda / valid as f64)))
}

/// DS term for a network `g`, evaluated on latents `z1`, `z2`.
pub fn ds_for<T: Real>(g: impl Fn(&Tensor<T>) -> Tensor<T>, z1: &Tensor<T>, z2: &Tensor<T>, lambda: f64, tau: f64) -> Result<Tensor<T>> {
    ds_regularizer(&g(z1), &g(z2), z1, z2, lambda, tau)
}

const BINOMIAL: [f64; 3] = [0.25, 0.5, 0.25];

/// Low-pass views of a batch for the discriminator.
///
/// `blur` is the 2-D binomial kernel; `blurvh` stacks vertically and
/// horizontally filtered copies along channels (`[N, H, W, 2C]`, vertical
/// first). Padding is by reflection.
pub fn blur_filter_bank<T: Real>(y: &Tensor<T>, mode: FilterMode) -> Tensor<T> {
    match mode {
        FilterMode::None => y.clone(),
        FilterMode::Blur => nn::filter_bank(y, &[Kernel2d::outer(&BINOMIAL, &BINOMIAL)]),
        FilterMode::Blurvh => nn::filter_bank(y, &[Kernel2d::outer(&BINOMIAL, &[1.0]), Kernel2d::outer(&[1.0], &BINOMIAL)]),
    }
}

/// `shadow <- decay * shadow + (1 - decay) * current`.
pub fn ema_update<T: Real>(shadow: &mut ParamSet<T>, current: &ParamSet<T>, decay: f64) -> Result<()> {
    if !shadow.same_layout(current) {
        return Err(Error::Shape("EMA shadow and current parameters differ in layout".into()));
    }
    for i in 0..shadow.len() {
        if decay == 1.0 {
            continue;
        }
        let next = if decay == 0.0 {
            current.get(i).to_vec()
        } else {
            shadow
                .get(i)
                .data()
                .iter()
                .zip(current.get(i).data())
                .map(|(&s, &c)| {
                    let (s, c) = (s.f64(), c.f64());
                    T::of(s + (1.0 - decay) * (c - s))
                })
                .collect()
        };
        shadow.set(i, next);
    }
    Ok(())
}

/// Full training state of one GAN run.
pub struct GanTrainer {
    pub bundle: GeneratorBundle<f32>,
    pub disc: Discriminator,
    pub params_d: ParamSet<f32>,
    pub opt_d: Adam,
    pub opt_x: Adam,
    pub opt_n: Adam,
    pub config: TrainConfig,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

struct Snapshot {
    params_x: ParamSet<f32>,
    params_n: ParamSet<f32>,
    ema_x: ParamSet<f32>,
    ema_n: ParamSet<f32>,
    params_d: ParamSet<f32>,
    opt: (Adam, Adam, Adam),
}

pub const TRAINER_KIND: &str = "gan_trainer";

impl GanTrainer {
    pub fn new(bundle: GeneratorBundle<f32>, config: TrainConfig, data_noise: Option<&NoiseSpec>) -> Result<Self> {
        config.validate(bundle.variant(), data_noise)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d15c);
        let mut params_d = ParamSet::new();
        let disc = Discriminator::build(&bundle.arch, config.filter_mode.out_channels(bundle.arch.channels), &mut params_d, &mut rng);
        let stream = config_stream(config.seed);
        Ok(GanTrainer {
            opt_d: Adam::new(config.adam, &params_d),
            opt_x: Adam::new(config.adam, &bundle.params_x),
            opt_n: Adam::new(config.adam, &bundle.params_n),
            bundle,
            disc,
            params_d,
            config,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(stream),
        })
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            params_x: self.bundle.params_x.clone(),
            params_n: self.bundle.params_n.clone(),
            ema_x: self.bundle.ema_x.clone(),
            ema_n: self.bundle.ema_n.clone(),
            params_d: self.params_d.clone(),
            opt: (self.opt_d.clone(), self.opt_x.clone(), self.opt_n.clone()),
        }
    }

    fn restore(&mut self, s: Snapshot) {
        self.bundle.params_x = s.params_x;
        self.bundle.params_n = s.params_n;
        self.bundle.ema_x = s.ema_x;
        self.bundle.ema_n = s.ema_n;
        self.params_d = s.params_d;
        (self.opt_d, self.opt_x, self.opt_n) = s.opt;
    }

    fn discriminate(&self, params_d: &ParamSet<f32>, y: &Tensor<f32>) -> Tensor<f32> {
        self.disc.forward(params_d, &blur_filter_bank(y, self.config.filter_mode))
    }

    /// Generated observations for one batch, with the noise draw when the
    /// variant has a noise path.
    fn fake_batch(&mut self, n: usize) -> Result<(Tensor<f32>, Option<NoiseDraw<f32>>)> {
        let b = &self.bundle;
        let dz = b.arch.latent_dim;
        let z_x = LatentBatch::sample(n, dz, LatentRole::Image, &mut self.rng);
        let x_g = b.generate_clean(&z_x, Weights::Live)?;
        match b.variant() {
            Variant::Gan => Ok((x_g, None)),
            Variant::AmbientGan => {
                let spec = b.ambient.as_ref().ok_or_else(|| invalid("bundle", "ambient variant without noise spec"))?;
                Ok((noise::ambient_forward(spec, &x_g, &mut self.rng)?, None))
            }
            _ => {
                let z_n = LatentBatch::sample(n, b.arch.noise_latent_dim, LatentRole::Noise, &mut self.rng);
                let eps = nn::randn(x_g.shape(), &mut self.rng);
                let draw = b.noise_from_variant(Some(&z_n), Some(&z_x), &x_g, &eps, &mut self.rng, Weights::Live)?;
                Ok((compose_observation(&x_g, &draw.noise)?, Some(draw)))
            }
        }
    }

    /// One discriminator update followed by one generator update. A
    /// divergent step is rolled back and reported with `diverged = true`.
    pub fn train_step(&mut self, real: &ImageBatch) -> Result<TrainMetrics> {
        self.train_step_with_lr(real, self.config.adam.lr)
    }

    pub fn train_step_with_lr(&mut self, real: &ImageBatch, lr: f64) -> Result<TrainMetrics> {
        let start = Instant::now();
        if real.range() != ValueRange::SymmetricUnit {
            return Err(Error::Precondition("GAN training expects [-1, 1] images".into()));
        }
        let [n, h, w, c] = real.shape();
        let a = &self.bundle.arch;
        if h != a.resolution || w != a.resolution || c != a.channels {
            return Err(Error::Shape(format!("batch {:?} does not match {}x{}x{} generator", real.shape(), a.resolution, a.resolution, a.channels)));
        }
        let snap = self.snapshot();

        // discriminator
        let (fake, _) = self.fake_batch(n)?;
        let fake = fake.detach();
        let y_real = real.to_tensor::<f32>();
        let pd = self.params_d.clone();
        let (r1, d_real) = r1_penalty(|y| self.discriminate(&pd, y), &y_real, self.config.r1_gamma)?;
        let d_fake = self.discriminate(&pd, &fake);
        let mut loss_d_val = f64::NAN;
        let mut r1_val = f64::NAN;
        let mut reason = None;
        match gan_losses(&d_real, &d_fake) {
            Ok((loss_d, _)) => {
                loss_d_val = loss_d.item() as f64;
                r1_val = r1.item() as f64;
                let total = loss_d.add(&r1);
                let grads = self.params_d.grads(&total);
                self.opt_d.update(&mut self.params_d, &grads, lr);
            }
            Err(e) => reason = Some(e.to_string()),
        }

        // generator
        let mut loss_g_val = f64::NAN;
        let mut ds_val = 0.0;
        if reason.is_none() {
            let (fake, draw) = self.fake_batch(n)?;
            let d_fake = self.discriminate(&self.params_d, &fake);
            let loss_g = d_fake.neg().softplus().mean();
            loss_g_val = loss_g.item() as f64;
            let mut objective = loss_g;
            if let Some(NoiseDraw { head: Some(head), head_input: Some(z), .. }) = &draw {
                if self.config.ds_lambda > 0.0 {
                    let half = n / 2;
                    let (o1, o2) = split_rows(head, half);
                    let (z1, z2) = split_rows(z, half);
                    let ds = ds_regularizer(&o1, &o2, &z1, &z2, self.config.ds_lambda, self.config.ds_tau)?;
                    ds_val = ds.item() as f64;
                    objective = objective.sub(&ds);
                }
            }
            let mut g = ParamSet::grads_joint(&[&self.bundle.params_x, &self.bundle.params_n], &objective).into_iter();
            let (gx, gn) = (g.next().expect("two sets"), g.next().expect("two sets"));
            self.opt_x.update(&mut self.bundle.params_x, &gx, lr);
            if !self.bundle.params_n.is_empty() {
                self.opt_n.update(&mut self.bundle.params_n, &gn, lr);
            }
            ema_update(&mut self.bundle.ema_x, &self.bundle.params_x, self.config.ema_decay)?;
            ema_update(&mut self.bundle.ema_n, &self.bundle.params_n, self.config.ema_decay)?;
        }

        let losses = [loss_d_val, r1_val, loss_g_val, ds_val];
        if reason.is_none() {
            if let Some(v) = losses.iter().find(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD) {
                reason = Some(format!("loss value {v} out of bounds"));
            }
        }
        if reason.is_none() && !(self.params_d.all_finite() && self.bundle.params_x.all_finite() && self.bundle.params_n.all_finite()) {
            reason = Some("non-finite parameters".into());
        }
        let diverged = reason.is_some();
        if diverged {
            self.restore(snap);
        }
        self.iteration += 1;
        Ok(TrainMetrics {
            iteration: self.iteration,
            order: "d_then_g".into(),
            loss_g: loss_g_val,
            loss_d: loss_d_val,
            r1: r1_val,
            ds: ds_val,
            diverged,
            wall_clock: start.elapsed().as_secs_f64(),
            eval: None,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "bundle": self.bundle.metadata(),
            "train": self.config,
            "iteration": self.iteration,
            "rng": RngState::capture(&self.rng),
        });
        let mut ck = Checkpoint::new(BUNDLE_KIND, meta);
        self.bundle.write_into(&mut ck);
        ck.put_params("d", &self.params_d);
        ck.put_adam("opt_d", &self.opt_d);
        ck.put_adam("opt_x", &self.opt_x);
        ck.put_adam("opt_n", &self.opt_n);
        ck
    }

    /// Resume from a checkpoint written by [`GanTrainer::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, expect: Option<Variant>) -> Result<Self> {
        let bundle = GeneratorBundle::from_checkpoint(ck, expect)?;
        let config: TrainConfig = serde_json::from_value(ck.meta["train"].clone())?;
        let mut t = GanTrainer::new(bundle, TrainConfig { allow_unfiltered_poisson: true, ..config.clone() }, None)?;
        t.config = config;
        ck.load_params("d", &mut t.params_d)?;
        ck.load_adam("opt_d", &mut t.opt_d)?;
        ck.load_adam("opt_x", &mut t.opt_x)?;
        ck.load_adam("opt_n", &mut t.opt_n)?;
        t.iteration = ck.meta["iteration"].as_u64().ok_or_else(|| Error::Checkpoint("missing iteration".into()))?;
        let rng: RngState = serde_json::from_value(ck.meta["rng"].clone())?;
        t.rng = rng.restore();
        Ok(t)
    }
}

fn config_stream(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

fn split_rows<T: Real>(t: &Tensor<T>, half: usize) -> (Tensor<T>, Tensor<T>) {
    // gathers rows [0, half) and [half, 2 half) through constant selection maps
    let n = t.shape()[0];
    let per = t.numel() / n;
    let mut rest = t.shape().to_vec();
    rest[0] = half;
    let pick = |offset: usize| {
        let e = (0..half * per).map(|j| (j, offset * per + j, 1.0)).collect();
        let map = std::sync::Arc::new(crate::tensor::sparse::SparseMap::new(n * per, half * per, e));
        t.reshape(&[n * per]).sparse(&map, false).reshape(&rest)
    };
    (pick(0), pick(half))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{BundleConfig, NetArch, Preset};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gan_losses_at_zero_logits() {
        let z = Tensor::<f64>::param(vec![0.0; 4], &[4]);
        let (d, g) = gan_losses(&z, &z).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((d.item() - 2.0 * ln2).abs() < 1e-12);
        assert!((g.item() - ln2).abs() < 1e-12);
        let f = Tensor::<f64>::param(vec![0.0], &[1]);
        let (_, g) = gan_losses(&f, &f).unwrap();
        let dg = grad(&g, &[&f], false)[0].clone().unwrap();
        assert!((dg.item() + 0.5).abs() < 1e-12);
        let big = Tensor::<f64>::from_vec(vec![800.0], &[1]);
        let (d, _) = gan_losses(&big, &big.neg()).unwrap();
        assert!(d.item() < 1e-300);
        assert!(gan_losses(&Tensor::<f64>::from_vec(vec![f64::NAN], &[1]), &big).is_err());
    }

    #[test]
    fn r1_on_linear_and_constant_discriminators() {
        let w = Tensor::<f64>::from_vec(vec![0.5, -1.0, 2.0, 0.25], &[4, 1]);
        let y: Tensor<f64> = nn::randn(&[3, 4], &mut rng(0));
        let (p, _) = r1_penalty(|y| y.matmul(&w).reshape(&[3]), &y, 10.0).unwrap();
        let norm2: f64 = w.data().iter().map(|v| v * v).sum();
        assert!((p.item() - 5.0 * norm2).abs() < 1e-12);
        let (p, _) = r1_penalty(|_| Tensor::<f64>::zeros(&[3]), &y, 10.0).unwrap();
        assert_eq!(p.item(), 0.0);
    }

    #[test]
    fn ds_closed_forms() {
        let z1: Tensor<f64> = nn::randn(&[6, 5], &mut rng(1));
        let z2: Tensor<f64> = nn::randn(&[6, 5], &mut rng(2));
        let c = Tensor::<f64>::full(0.3, &[6, 5]);
        assert_eq!(ds_regularizer(&c, &c, &z1, &z2, 0.02, 0.0).unwrap().item(), 0.0);
        let id = ds_for(|z| z.clone(), &z1, &z2, 0.02, 0.0).unwrap().item();
        assert!((id - 0.02).abs() < 1e-12);
        let two = ds_for(|z| z.scale(2.0), &z1, &z2, 0.02, 1.5).unwrap().item();
        assert!((two - 1.5 * 0.02).abs() < 1e-12);
        // identical latents are skipped
        assert_eq!(ds_for(|z| z.clone(), &z1, &z1, 0.02, 0.0).unwrap().item(), 0.0);
    }

    #[test]
    fn blur_modes_preserve_constants() {
        let y = Tensor::<f64>::full(0.7, &[2, 5, 6, 3]);
        for (mode, ch) in [(FilterMode::None, 3), (FilterMode::Blur, 3), (FilterMode::Blurvh, 6)] {
            let out = blur_filter_bank(&y, mode);
            assert_eq!(out.shape(), &[2, 5, 6, ch]);
            assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn ema_closed_forms() {
        let mut cur = ParamSet::<f64>::new();
        cur.push("w", vec![2.0, -3.0], &[2]);
        let mut shadow = ParamSet::<f64>::new();
        shadow.push("w", vec![0.0, 0.0], &[2]);
        let mut s0 = shadow.clone();
        ema_update(&mut s0, &cur, 0.0).unwrap();
        assert_eq!(s0.get(0).data(), cur.get(0).data());
        let mut s1 = shadow.clone();
        ema_update(&mut s1, &cur, 1.0).unwrap();
        assert_eq!(s1.get(0).data(), shadow.get(0).data());
        for _ in 0..50 {
            ema_update(&mut shadow, &cur, 0.999).unwrap();
        }
        let f = 1.0 - 0.999f64.powi(50);
        assert!((shadow.get(0).data()[0] - 2.0 * f).abs() < 1e-12);
        let mut other = ParamSet::<f64>::new();
        other.push("v", vec![0.0], &[1]);
        assert!(ema_update(&mut other, &cur, 0.5).is_err());
    }

    fn toy_batch(n: usize) -> ImageBatch {
        let data = (0..n * 8 * 8 * 3).map(|i| ((i * 31 % 17) as f32 / 8.5) - 1.0).collect();
        ImageBatch::new(data, [n, 8, 8, 3], ValueRange::SymmetricUnit).unwrap()
    }

    fn trainer(v: Variant, lr: f64) -> GanTrainer {
        let bundle = GeneratorBundle::new(BundleConfig::for_variant(v), NetArch::preset(Preset::Tiny, 3), None, &mut rng(3)).unwrap();
        let config = TrainConfig { batch_size: 4, adam: AdamConfig { lr, ..AdamConfig::GAN }, ..TrainConfig::default() };
        GanTrainer::new(bundle, config, None).unwrap()
    }

    #[test]
    fn zero_rate_step_leaves_parameters_bit_identical() {
        let mut t = trainer(Variant::Si1, 0.0);
        let before = (t.bundle.params_x.clone(), t.bundle.params_n.clone(), t.params_d.clone());
        let m = t.train_step(&toy_batch(4)).unwrap();
        assert!(!m.diverged);
        for (a, b) in [(&before.0, &t.bundle.params_x), (&before.1, &t.bundle.params_n), (&before.2, &t.params_d)] {
            for i in 0..a.len() {
                assert_eq!(a.get(i).data(), b.get(i).data());
            }
        }
    }

    #[test]
    fn steps_are_deterministic_per_seed() {
        let run = || {
            let mut t = trainer(Variant::Sd3, 2e-4);
            (0..2).map(|_| serde_json::to_string(&t.train_step(&toy_batch(4)).unwrap()).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn poisson_data_requires_blurvh() {
        let spec = NoiseSpec::preset(crate::noise::NoiseVariant::M);
        let c = TrainConfig::default();
        assert!(c.validate(Variant::Sd1Poisson, Some(&spec)).is_err());
        assert!(c.validate(Variant::Gan, Some(&spec)).is_ok());
        let c = TrainConfig { filter_mode: FilterMode::Blurvh, ..c };
        assert!(c.validate(Variant::Sd1Poisson, Some(&spec)).is_ok());
    }

    #[test]
    fn train_config_kv_round_trip() {
        let c = TrainConfig { ds_tau: 1.5, filter_mode: FilterMode::Blurvh, seed: 9, ..TrainConfig::default() };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn trainer_checkpoint_resumes_identically() {
        let mut a = trainer(Variant::Si2, 2e-4);
        a.train_step(&toy_batch(4)).unwrap();
        let ck = Checkpoint::from_bytes(&a.to_checkpoint().to_bytes().unwrap()).unwrap();
        let mut b = GanTrainer::from_checkpoint(&ck, Some(Variant::Si2)).unwrap();
        let line = |t: &mut GanTrainer| serde_json::to_string(&t.train_step(&toy_batch(4)).unwrap()).unwrap();
        assert_eq!(line(&mut a), line(&mut b));
    }
}
