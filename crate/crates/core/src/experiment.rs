//! Config-driven runs: dataset construction, GAN or denoiser training,
//! evaluation, sample grids and checkpoints under one output directory.
//!
//! Layout of `out_dir`:
//!
//! ```text
//! config.canonical   complete, sorted key-value config
//! manifest.json      per-image corruption record
//! metrics.jsonl      one record per training step
//! ckpt/              iter_XXXXXX.ckpt and final.ckpt
//! grids/             PNG sample grids
//! stats/             cached real feature statistics
//! report.json        final evaluation
//! DIVERGED           present only when a run stopped on divergence
//! ```

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TensorData};
use crate::data::{build_dataset, derive_seed, Corruption, Dataset, DatasetConfig, DatasetKind, ToyOracle};
use crate::denoise::{DenoiseConfig, DenoiseData, Denoiser, DenoiserTrainer, PairSampler, Scheme, DENOISER_KIND};
use crate::error::{invalid, Error, Result};
use crate::eval::{feature_stats, frechet_distance, mean_psnr, ConvFeatureNet, FeatureExtractor, FeatureStats};
use crate::generators::{compose_observation, BundleConfig, GeneratorBundle, LatentBatch, LatentRole, NetArch, Preset, Variant, Weights, BUNDLE_KIND};
use crate::image::{ImageBatch, ValueRange};
use crate::kv::KvMap;
use crate::nn;
use crate::noise::{self, NoiseSpec};
use crate::training::{GanTrainer, TrainConfig};

pub const ENV_OUT_DIR: &str = "NRGAN_OUT_DIR";
pub const ENV_SEED: &str = "NRGAN_SEED";
pub const DIVERGED_MARKER: &str = "DIVERGED";

/// Keys a noise section may carry besides its mixture components.
const NOISE_KEYS: &[&str] = &[
    "variant", "sigma", "sigma_lo", "sigma_hi", "sigma_mult", "patch_h", "patch_h_lo", "patch_h_hi", "patch_w", "patch_w_lo",
    "patch_w_hi", "lam", "lam_lo", "lam_hi", "kernel", "brown_renormalize",
];

const STREAM_INIT: u64 = 101;
const STREAM_BATCH: u64 = 102;
const STREAM_EVAL: u64 = 103;
const STREAM_GRID: u64 = 104;

const GRID_SIDE: usize = 4;
const SAMPLE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Gan,
    Denoiser,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gan" => Ok(Task::Gan),
            "denoiser" => Ok(Task::Denoiser),
            _ => Err(Error::Config(format!("unknown task {s:?} (gan, denoiser)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Gan => "gan",
            Task::Denoiser => "denoiser",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Evaluate every this many steps during training; `0` only at the end.
    pub every: u64,
    /// Real and generated sample count for FID.
    pub fid_samples: usize,
    pub extractor_seed: u64,
    /// External extractor weights; empty selects the seeded network.
    pub extractor_path: String,
    pub feature_dim: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { every: 0, fid_samples: 2000, extractor_seed: 0, extractor_path: String::new(), feature_dim: ConvFeatureNet::DEFAULT_DIM }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Master seed; overrides the training and denoiser seeds.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub corruption: Corruption,
    pub preset: Preset,
    /// Latent sizes; `0` keeps the preset's value.
    pub latent_dim: usize,
    pub noise_latent_dim: usize,
    pub model: BundleConfig,
    pub train: TrainConfig,
    pub scheme: Scheme,
    /// Pair source for `gn2gc`: a generator checkpoint path, or `oracle`
    /// for the exact toy distribution and noise law.
    pub denoise_bundle: String,
    pub denoise: DenoiseConfig,
    pub eval: EvalConfig,
    /// Checkpoint cadence in steps; `0` writes only the final checkpoint.
    pub ckpt_every: u64,
    /// Grid cadence in steps; `0` writes only the final grids.
    pub grid_every: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::from_kv(&KvMap::new()).expect("defaults are valid")
    }
}

fn noise_section(m: &KvMap, prefix: &str) -> Result<Option<NoiseSpec>> {
    let sec = m.section(prefix);
    match sec.get("variant") {
        None | Some("none") => Ok(None),
        Some(_) => NoiseSpec::from_kv(&sec).map(Some),
    }
}

fn noise_kv(spec: &Option<NoiseSpec>, prefix: &str) -> KvMap {
    match spec {
        Some(s) => s.to_kv().prefixed(prefix),
        None => {
            let mut m = KvMap::new();
            m.insert(format!("{prefix}.variant"), "none");
            m
        }
    }
}

impl ExperimentConfig {
    /// Parse a flat key-value map. Missing keys take their defaults;
    /// unknown keys are rejected.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let seed: u64 = m.parse_or("seed", 0)?;
        for key in ["train.seed", "denoise.seed"] {
            if m.contains(key) {
                return Err(Error::Config(format!("`{key}` is derived from the master `seed`")));
            }
        }
        let noise = noise_section(m, "noise")?;
        let noise_b = noise_section(m, "noise_b")?;
        let default_rate = if noise.is_some() { 1.0 } else { 0.0 };
        let corruption = Corruption {
            noise,
            noise_b,
            rate: m.parse_or("noise_rate", default_rate)?,
            mixture_rate: m.parse_or("mixture_rate", 0.0)?,
        };
        let model_kv = m.section("model");
        let d = EvalConfig::default();
        let cfg = ExperimentConfig {
            task: m.parse_or("task", Task::Gan)?,
            seed,
            out_dir: PathBuf::from(m.get("out_dir").unwrap_or("runs/default")),
            dataset: DatasetConfig::from_kv(&m.section("dataset"))?,
            corruption,
            preset: model_kv.parse_or("preset", Preset::Tiny)?,
            latent_dim: model_kv.parse_or("latent_dim", 0)?,
            noise_latent_dim: model_kv.parse_or("noise_latent_dim", 0)?,
            model: BundleConfig::from_kv(&model_kv)?,
            train: TrainConfig { seed, ..TrainConfig::from_kv(&m.section("train"))? },
            scheme: m.parse_or("denoise.scheme", Scheme::N2c)?,
            denoise_bundle: m.get("denoise.bundle").unwrap_or_default().to_string(),
            denoise: DenoiseConfig { seed, ..DenoiseConfig::from_kv(&m.section("denoise"))? },
            eval: EvalConfig {
                every: m.parse_or("eval.every", d.every)?,
                fid_samples: m.parse_or("eval.fid_samples", d.fid_samples)?,
                extractor_seed: m.parse_or("eval.extractor_seed", d.extractor_seed)?,
                extractor_path: m.get("eval.extractor_path").unwrap_or_default().to_string(),
                feature_dim: m.parse_or("eval.feature_dim", d.feature_dim)?,
            },
            ckpt_every: m.parse_or("ckpt_every", 1000)?,
            grid_every: m.parse_or("grid_every", 1000)?,
        };
        let canonical = cfg.to_kv();
        for key in m.keys() {
            if canonical.contains(key) {
                continue;
            }
            let noise_key = key
                .strip_prefix("noise.")
                .or_else(|| key.strip_prefix("noise_b."))
                .is_some_and(|rest| NOISE_KEYS.contains(&rest) || rest.starts_with("mixture."));
            if !noise_key {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        Ok(cfg)
    }

    /// Complete form with every field; feeding it back yields the same
    /// config.
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("task", self.task);
        m.insert("seed", self.seed);
        m.insert("out_dir", self.out_dir.display());
        m.extend(self.dataset.to_kv().prefixed("dataset"));
        m.extend(noise_kv(&self.corruption.noise, "noise"));
        m.extend(noise_kv(&self.corruption.noise_b, "noise_b"));
        m.insert("noise_rate", self.corruption.rate);
        m.insert("mixture_rate", self.corruption.mixture_rate);
        m.insert("model.preset", self.preset);
        m.insert("model.latent_dim", self.latent_dim);
        m.insert("model.noise_latent_dim", self.noise_latent_dim);
        m.extend(self.model.to_kv().prefixed("model"));
        let mut train = self.train.to_kv();
        train.remove("seed");
        m.extend(train.prefixed("train"));
        let mut den = self.denoise.to_kv();
        den.remove("seed");
        m.extend(den.prefixed("denoise"));
        m.insert("denoise.scheme", self.scheme);
        m.insert("denoise.bundle", &self.denoise_bundle);
        m.insert("eval.every", self.eval.every);
        m.insert("eval.fid_samples", self.eval.fid_samples);
        m.insert("eval.extractor_seed", self.eval.extractor_seed);
        m.insert("eval.extractor_path", &self.eval.extractor_path);
        m.insert("eval.feature_dim", self.eval.feature_dim);
        m.insert("ckpt_every", self.ckpt_every);
        m.insert("grid_every", self.grid_every);
        m
    }

    /// Generator architecture: the preset with any latent-size overrides.
    pub fn arch(&self) -> NetArch {
        let mut a = NetArch::preset(self.preset, self.dataset.channels);
        if self.latent_dim > 0 {
            a.latent_dim = self.latent_dim;
        }
        if self.noise_latent_dim > 0 {
            a.noise_latent_dim = self.noise_latent_dim;
        }
        a
    }

    pub fn canonical(&self) -> String {
        self.to_kv().to_string()
    }

    /// Layered sources: file, then environment (`out_dir` and `seed` only),
    /// then `key=value` overrides.
    pub fn resolve(file: Option<&str>, env: impl Fn(&str) -> Option<String>, overrides: &[String]) -> Result<Self> {
        let mut m = match file {
            Some(text) => KvMap::parse(text)?,
            None => KvMap::new(),
        };
        if let Some(v) = env(ENV_OUT_DIR) {
            m.insert("out_dir", v);
        }
        if let Some(v) = env(ENV_SEED) {
            m.insert("seed", v);
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            m.insert(k.trim(), v.trim());
        }
        let cfg = ExperimentConfig::from_kv(&m)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`ExperimentConfig::resolve`] with a config file path and the process
    /// environment.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path.map(fs::read_to_string).transpose()?;
        ExperimentConfig::resolve(text.as_deref(), |k| std::env::var(k).ok(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.corruption.validate()?;
        self.model.validate()?;
        self.denoise.validate()?;
        if self.dataset.resolution == 0 || !matches!(self.dataset.channels, 1 | 3) {
            return Err(invalid("dataset", "resolution must be positive and channels 1 or 3"));
        }
        if self.eval.fid_samples < 2 || self.eval.feature_dim == 0 {
            return Err(invalid("eval config", "fid_samples must be >= 2 and feature_dim >= 1"));
        }
        match self.task {
            Task::Gan => {
                let arch = self.arch();
                if arch.resolution != self.dataset.resolution {
                    return Err(invalid(
                        "experiment",
                        format!("model preset {} generates {} px images, dataset has {}", self.preset, arch.resolution, self.dataset.resolution),
                    ));
                }
                if self.model.variant == Variant::AmbientGan && self.corruption.noise.is_none() {
                    return Err(invalid("experiment", "the ambient variant needs the data noise spec"));
                }
                self.train.validate(self.model.variant, self.corruption.noise.as_ref())?;
            }
            Task::Denoiser => {
                if self.corruption.noise.is_none() {
                    return Err(invalid("experiment", "denoiser runs need a noise spec"));
                }
                if self.scheme == Scheme::Gn2gc {
                    if self.denoise_bundle.is_empty() {
                        return Err(invalid("experiment", "gn2gc needs denoise.bundle (a generator checkpoint or `oracle`)"));
                    }
                    if self.denoise_bundle == "oracle" && self.dataset.kind != DatasetKind::SyntheticToy {
                        return Err(invalid("experiment", "oracle pairs exist only for the synthetic toy dataset"));
                    }
                }
            }
        }
        Ok(())
    }

    fn build_dataset(&self) -> Result<Dataset> {
        build_dataset(&self.dataset, &self.corruption, self.seed)
    }
}

/// Tile the first `rows * cols` images row-major into one lossless PNG,
/// clipping to the batch's value range.
pub fn emit_grid(images: &ImageBatch, rows: usize, cols: usize, path: &Path) -> Result<()> {
    let [n, h, w, c] = images.shape();
    if rows == 0 || cols == 0 || rows * cols > n {
        return Err(invalid("grid", format!("{rows}x{cols} grid needs {} images, batch has {n}", rows * cols)));
    }
    let (gw, gh) = (cols * w, rows * h);
    let mut buf = vec![0u8; gh * gw * c];
    for i in 0..rows * cols {
        let (r, col) = (i / cols, i % cols);
        let img = images.image(i);
        for y in 0..h {
            let dst = ((r * h + y) * gw + col * w) * c;
            let src = y * w * c;
            for (o, &v) in buf[dst..dst + w * c].iter_mut().zip(&img[src..src + w * c]) {
                *o = quantize(v, images.range());
            }
        }
    }
    write_png(&buf, gw, gh, c, path)
}

/// Write each image of `images` to `dir/names[i]` as PNG.
pub fn save_images(images: &ImageBatch, dir: &Path, names: &[String]) -> Result<()> {
    let [n, h, w, c] = images.shape();
    if names.len() != n {
        return Err(invalid("image export", format!("{} names for {n} images", names.len())));
    }
    fs::create_dir_all(dir)?;
    for (i, name) in names.iter().enumerate() {
        let buf: Vec<u8> = images.image(i).iter().map(|&v| quantize(v, images.range())).collect();
        write_png(&buf, w, h, c, &dir.join(name))?;
    }
    Ok(())
}

fn quantize(v: f32, range: ValueRange) -> u8 {
    let (lo, hi) = range.bounds();
    ((v.clamp(lo, hi) - lo) / (hi - lo) * 255.0).round() as u8
}

fn write_png(buf: &[u8], w: usize, h: usize, c: usize, path: &Path) -> Result<()> {
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(invalid("image export", format!("{c} channels unsupported (1 or 3)"))),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    image::save_buffer_with_format(path, buf, w as u32, h as u32, color, image::ImageFormat::Png)?;
    Ok(())
}

/// FID reference: the extractor and cached statistics of the clean test
/// split.
pub struct Evaluator {
    pub extractor: ConvFeatureNet,
    pub real: FeatureStats,
}

impl Evaluator {
    /// Load or compute the real statistics. A cache built by a different
    /// extractor is an error rather than silently replaced.
    pub fn prepare(cfg: &ExperimentConfig, test: &ImageBatch) -> Result<Self> {
        let extractor = if cfg.eval.extractor_path.is_empty() {
            ConvFeatureNet::random(cfg.dataset.channels, cfg.eval.feature_dim, cfg.eval.extractor_seed)
        } else {
            ConvFeatureNet::load(Path::new(&cfg.eval.extractor_path))?
        };
        let count = cfg.eval.fid_samples.min(test.len());
        let mut h = Sha256::new();
        h.update(cfg.dataset.to_kv().to_string());
        h.update(format!("seed={};count={count}", cfg.seed));
        let tag: String = h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
        let path = cfg.out_dir.join("stats").join(format!("real_test_{tag}.stats"));
        let real = if path.exists() {
            let s = FeatureStats::load(&path)?;
            if s.fingerprint != extractor.fingerprint() {
                return Err(Error::Stats(format!(
                    "cached statistics {} were computed with extractor {}, current extractor is {}",
                    path.display(),
                    s.fingerprint,
                    extractor.fingerprint()
                )));
            }
            s
        } else {
            let idx: Vec<usize> = (0..count).collect();
            let s = feature_stats(&test.select(&idx), &extractor)?;
            fs::create_dir_all(path.parent().expect("stats dir"))?;
            s.save(&path)?;
            s
        };
        Ok(Evaluator { extractor, real })
    }

    pub fn fid(&self, fake: &ImageBatch) -> Result<f64> {
        frechet_distance(&self.real, &feature_stats(fake, &self.extractor)?)
    }

    fn describe(&self) -> Value {
        json!({
            "fingerprint": self.extractor.fingerprint(),
            "source": self.extractor.source,
            "dim": self.extractor.dim(),
            "real_samples": self.real.n,
        })
    }
}

/// EMA samples of a bundle: clean images, observations (for variants with a
/// noise model) and the summed sigma-map values (for sigma variants).
pub struct GanSamples {
    pub clean: ImageBatch,
    pub observed: Option<ImageBatch>,
    pub sigma_mean: Option<f64>,
}

pub fn sample_bundle<R: Rng>(bundle: &GeneratorBundle<f32>, n: usize, rng: &mut R) -> Result<GanSamples> {
    let v = bundle.variant();
    let (mut clean, mut observed) = (Vec::new(), Vec::new());
    let mut sigma_sum = 0.0f64;
    let mut sigma_count = 0usize;
    for start in (0..n).step_by(SAMPLE_CHUNK) {
        let m = SAMPLE_CHUNK.min(n - start);
        let z_x = LatentBatch::sample(m, bundle.arch.latent_dim, LatentRole::Image, rng);
        let x = bundle.generate_clean(&z_x, Weights::Ema)?;
        clean.extend_from_slice(x.data());
        if v.learns_noise() {
            let z_n = LatentBatch::sample(m, bundle.arch.noise_latent_dim, LatentRole::Noise, rng);
            let eps = nn::randn(x.shape(), rng);
            let draw = bundle.noise_from_variant(Some(&z_n), Some(&z_x), &x, &eps, rng, Weights::Ema)?;
            observed.extend_from_slice(compose_observation(&x, &draw.noise)?.data());
            if v.emits_sigma() {
                if let Some(head) = &draw.head {
                    sigma_sum += head.data().iter().map(|&s| s as f64).sum::<f64>();
                    sigma_count += head.numel();
                }
            }
        } else if let (Variant::AmbientGan, Some(spec)) = (v, &bundle.ambient) {
            observed.extend_from_slice(noise::ambient_forward(spec, &x, rng)?.data());
        }
    }
    let r = bundle.arch.resolution;
    let shape = [n, r, r, bundle.arch.channels];
    let observed = if observed.is_empty() { None } else { Some(ImageBatch::new(observed, shape, ValueRange::SymmetricUnit)?) };
    Ok(GanSamples {
        clean: ImageBatch::new(clean, shape, ValueRange::SymmetricUnit)?,
        observed,
        sigma_mean: (sigma_count > 0).then(|| sigma_sum / sigma_count as f64),
    })
}

/// FID of EMA clean samples (and of composed observations, when the
/// variant produces them) against the clean test split.
pub fn evaluate_gan(bundle: &GeneratorBundle<f32>, iteration: u64, cfg: &ExperimentConfig, evaluator: &Evaluator) -> Result<Value> {
    let n = cfg.eval.fid_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EVAL, 0));
    let s = sample_bundle(bundle, n, &mut rng)?;
    let fid_observed = s.observed.as_ref().map(|o| evaluator.fid(o)).transpose()?;
    Ok(json!({
        "task": "gan",
        "variant": bundle.variant().name(),
        "iteration": iteration,
        "fid_clean": evaluator.fid(&s.clean)?,
        "fid_observed": fid_observed,
        "sigma_map_mean": s.sigma_mean,
        "fid_fake_samples": n,
        "reference": "clean test split",
        "extractor": evaluator.describe(),
    }))
}

/// Mean per-image PSNR over the test split, for denoised and raw noisy
/// inputs, on the `[-0.5, 0.5]` scale with peak 1.
pub fn evaluate_denoiser(denoiser: &Denoiser, iteration: u64, scheme: Option<Scheme>, dataset: &Dataset) -> Result<Value> {
    let noisy = dataset.noisy_test()?.ok_or_else(|| invalid("evaluation", "denoiser evaluation needs a noise spec"))?;
    let clean = dataset.test.to_range(ValueRange::HalfUnit);
    let noisy = noisy.to_range(ValueRange::HalfUnit);
    let denoised = denoiser.denoise(&noisy)?;
    Ok(json!({
        "task": "denoiser",
        "scheme": scheme.map(|s| s.name()),
        "iteration": iteration,
        "psnr_denoised": mean_psnr(&clean, &denoised)?,
        "psnr_noisy": mean_psnr(&clean, &noisy)?,
        "test_images": clean.len(),
        "peak": 1.0,
    }))
}

/// Evaluate a generator or denoiser checkpoint against the config's test
/// split.
pub fn evaluate_run(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<Value> {
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = cfg.build_dataset()?;
    match ck.kind.as_str() {
        BUNDLE_KIND => {
            let bundle = GeneratorBundle::from_checkpoint(&ck, None)?;
            let iteration = ck.meta["iteration"].as_u64().unwrap_or(0);
            let evaluator = Evaluator::prepare(cfg, &dataset.test)?;
            evaluate_gan(&bundle, iteration, cfg, &evaluator)
        }
        DENOISER_KIND => {
            let denoiser = Denoiser::from_checkpoint(&ck)?;
            let run = &ck.meta["run"];
            let scheme = serde_json::from_value(run["scheme"].clone()).ok();
            evaluate_denoiser(&denoiser, run["iteration"].as_u64().unwrap_or(0), scheme, &dataset)
        }
        other => Err(Error::Checkpoint(format!("cannot evaluate a `{other}` container"))),
    }
}

/// Outcome of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub iterations: u64,
    pub report: Value,
}

struct RunDir {
    root: PathBuf,
    metrics: BufWriter<File>,
}

impl RunDir {
    fn create(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg.out_dir.clone();
        let unwritable = |e: std::io::Error| Error::Precondition(format!("output directory {} is not writable: {e}", root.display()));
        fs::create_dir_all(&root).map_err(unwritable)?;
        fs::write(root.join("config.canonical"), cfg.canonical()).map_err(unwritable)?;
        let marker = root.join(DIVERGED_MARKER);
        if marker.exists() {
            fs::remove_file(marker)?;
        }
        let metrics = BufWriter::new(File::create(root.join("metrics.jsonl")).map_err(unwritable)?);
        Ok(RunDir { root, metrics })
    }

    fn log(&mut self, record: &Value) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn checkpoint(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        let dir = self.root.join("ckpt");
        fs::create_dir_all(&dir)?;
        ck.save(&dir.join(name))
    }

    fn grid(&self, name: &str, images: &ImageBatch) -> Result<()> {
        emit_grid(images, GRID_SIDE, GRID_SIDE, &self.root.join("grids").join(name))
    }

    fn diverged(&mut self, iteration: u64, reason: &str) -> Error {
        let _ = self.metrics.flush();
        let _ = fs::write(self.root.join(DIVERGED_MARKER), format!("iteration {iteration}: {reason}\n"));
        Error::Diverged { iteration, reason: reason.to_string() }
    }

    fn finish(mut self, report: &Value) -> Result<()> {
        self.metrics.flush()?;
        fs::write(self.root.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
        Ok(())
    }
}

fn due(every: u64, iteration: u64) -> bool {
    every > 0 && iteration % every == 0
}

/// Write the dataset manifest and a container of the materialized splits.
pub fn build_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dataset = cfg.build_dataset()?;
    let root = &cfg.out_dir;
    fs::create_dir_all(root).map_err(|e| Error::Precondition(format!("output directory {} is not writable: {e}", root.display())))?;
    fs::write(root.join("config.canonical"), cfg.canonical())?;
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&dataset.manifest)? + "\n")?;
    let mut ck = Checkpoint::new("dataset", json!({ "seed": cfg.seed, "corrupted": dataset.manifest.corrupted }));
    for (name, b) in [("train_clean", &dataset.train_clean), ("train", &dataset.train), ("test", &dataset.test)] {
        ck.push(name, &b.shape(), TensorData::F32(b.data().to_vec()));
    }
    ck.save(&root.join("dataset.ckpt"))?;
    let shown = GRID_SIDE * GRID_SIDE;
    if dataset.train.len() >= shown {
        emit_grid(&dataset.train, GRID_SIDE, GRID_SIDE, &root.join("grids").join("train_observed.png"))?;
    }
    Ok(dataset)
}

/// Build the dataset, train, checkpoint, evaluate. A divergent step stops
/// the run, leaves a `DIVERGED` marker and returns [`Error::Diverged`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let mut dir = RunDir::create(cfg)?;
    let dataset = cfg.build_dataset()?;
    fs::write(dir.root.join("manifest.json"), serde_json::to_string_pretty(&dataset.manifest)? + "\n")?;
    let (iterations, report) = match cfg.task {
        Task::Gan => run_gan(cfg, &dataset, &mut dir)?,
        Task::Denoiser => run_denoiser(cfg, &dataset, &mut dir)?,
    };
    dir.finish(&report)?;
    Ok(RunSummary { out_dir: cfg.out_dir.clone(), iterations, report })
}

fn gan_grids(dir: &RunDir, bundle: &GeneratorBundle<f32>, cfg: &ExperimentConfig, tag: &str) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_GRID, 0));
    let s = sample_bundle(bundle, GRID_SIDE * GRID_SIDE, &mut rng)?;
    dir.grid(&format!("{tag}_clean.png"), &s.clean)?;
    if let Some(o) = &s.observed {
        dir.grid(&format!("{tag}_observed.png"), &o.clipped())?;
    }
    Ok(())
}

fn run_gan(cfg: &ExperimentConfig, dataset: &Dataset, dir: &mut RunDir) -> Result<(u64, Value)> {
    let arch = cfg.arch();
    let ambient = if cfg.model.variant == Variant::AmbientGan { cfg.corruption.noise.clone() } else { None };
    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT, 0));
    let bundle = GeneratorBundle::new(cfg.model.clone(), arch, ambient, &mut init)?;
    let mut trainer = GanTrainer::new(bundle, cfg.train.clone(), cfg.corruption.noise.as_ref())?;
    let evaluator = Evaluator::prepare(cfg, &dataset.test)?;
    let n = dataset.train.len();
    while trainer.iteration < cfg.train.iterations {
        let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_BATCH, trainer.iteration));
        let idx: Vec<usize> = (0..cfg.train.batch_size).map(|_| pick.random_range(0..n)).collect();
        let mut m = trainer.train_step(&dataset.train.select(&idx))?;
        let it = m.iteration;
        if m.diverged {
            dir.log(&serde_json::to_value(&m)?)?;
            return Err(dir.diverged(it, "GAN losses or parameters out of bounds; step rolled back"));
        }
        if due(cfg.eval.every, it) {
            let r = evaluate_gan(&trainer.bundle, it, cfg, &evaluator)?;
            m.eval = Some(json!({
                "fid_clean": r["fid_clean"],
                "fid_observed": r["fid_observed"],
                "sigma_map_mean": r["sigma_map_mean"],
                "fid_real_samples": evaluator.real.n,
                "fid_fake_samples": cfg.eval.fid_samples,
            }));
        }
        dir.log(&serde_json::to_value(&m)?)?;
        if due(cfg.ckpt_every, it) {
            dir.checkpoint(&format!("iter_{it:06}.ckpt"), &trainer.to_checkpoint())?;
        }
        if due(cfg.grid_every, it) {
            gan_grids(dir, &trainer.bundle, cfg, &format!("iter_{it:06}"))?;
        }
    }
    dir.checkpoint("final.ckpt", &trainer.to_checkpoint())?;
    gan_grids(dir, &trainer.bundle, cfg, "final")?;
    let report = evaluate_gan(&trainer.bundle, trainer.iteration, cfg, &evaluator)?;
    Ok((trainer.iteration, report))
}

fn pair_sampler(cfg: &ExperimentConfig) -> Result<Option<Box<dyn PairSampler>>> {
    if cfg.scheme != Scheme::Gn2gc {
        return Ok(None);
    }
    if cfg.denoise_bundle == "oracle" {
        let noise = cfg.corruption.noise.clone().ok_or_else(|| invalid("experiment", "oracle pairs need a noise spec"))?;
        return Ok(Some(Box::new(ToyOracle { resolution: cfg.dataset.resolution, channels: cfg.dataset.channels, noise })));
    }
    let bundle = GeneratorBundle::from_checkpoint(&Checkpoint::load(Path::new(&cfg.denoise_bundle))?, None)?;
    if bundle.arch.channels != cfg.dataset.channels {
        return Err(invalid("experiment", "generator bundle and dataset disagree on channels"));
    }
    Ok(Some(Box::new(bundle)))
}

fn denoiser_grid(dir: &RunDir, denoiser: &Denoiser, noisy_test: &ImageBatch, tag: &str) -> Result<()> {
    let idx: Vec<usize> = (0..GRID_SIDE * GRID_SIDE).collect();
    let out = denoiser.denoise(&noisy_test.select(&idx).to_range(ValueRange::HalfUnit))?;
    dir.grid(&format!("{tag}_denoised.png"), &out)
}

fn run_denoiser(cfg: &ExperimentConfig, dataset: &Dataset, dir: &mut RunDir) -> Result<(u64, Value)> {
    let pair = if cfg.scheme == Scheme::N2n { Some(dataset.second_realization()?) } else { None };
    let sampler = pair_sampler(cfg)?;
    let data = DenoiseData {
        clean: (cfg.scheme == Scheme::N2c).then_some(&dataset.train_clean),
        noisy: Some(&dataset.train),
        noisy_pair: pair.as_ref(),
        noise: None,
        sampler: sampler.as_deref(),
    };
    let noisy_test = dataset.noisy_test()?.ok_or_else(|| invalid("experiment", "denoiser runs need a noise spec"))?;
    if noisy_test.len() < GRID_SIDE * GRID_SIDE {
        return Err(invalid("experiment", format!("denoiser grids need at least {} test images", GRID_SIDE * GRID_SIDE)));
    }
    let mut trainer = DenoiserTrainer::new(cfg.scheme, cfg.dataset.channels, cfg.denoise.clone())?;
    while trainer.iteration < cfg.denoise.iterations {
        let m = trainer.step(&data)?;
        let it = m.iteration;
        let mut record = serde_json::to_value(&m)?;
        if m.diverged {
            dir.log(&record)?;
            return Err(dir.diverged(it, "denoiser loss or parameters out of bounds; step rolled back"));
        }
        if due(cfg.eval.every, it) {
            let r = evaluate_denoiser(&trainer.denoiser, it, Some(cfg.scheme), dataset)?;
            record["eval"] = json!({ "psnr_denoised": r["psnr_denoised"], "psnr_noisy": r["psnr_noisy"], "test_images": r["test_images"] });
        }
        dir.log(&record)?;
        if due(cfg.ckpt_every, it) {
            dir.checkpoint(&format!("iter_{it:06}.ckpt"), &trainer.to_checkpoint())?;
        }
        if due(cfg.grid_every, it) {
            denoiser_grid(dir, &trainer.denoiser, &noisy_test, &format!("iter_{it:06}"))?;
        }
    }
    dir.checkpoint("final.ckpt", &trainer.to_checkpoint())?;
    denoiser_grid(dir, &trainer.denoiser, &noisy_test, "final")?;
    dir.grid("test_noisy.png", &noisy_test.clipped())?;
    let report = evaluate_denoiser(&trainer.denoiser, trainer.iteration, Some(cfg.scheme), dataset)?;
    Ok((trainer.iteration, report))
}
