//! Dataset materialization: the synthetic toy distribution, image-folder
//! ingestion, and frozen corruption with a per-image manifest.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoise::PairSampler;
use crate::error::{invalid, Error, Result};
use crate::image::{ImageBatch, ValueRange};
use crate::kv::KvMap;
use crate::noise::{self, NoiseSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SyntheticToy,
    ImageFolder,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic_toy" => Ok(DatasetKind::SyntheticToy),
            "image_folder" => Ok(DatasetKind::ImageFolder),
            _ => Err(Error::Config(format!("unknown dataset kind {s:?} (synthetic_toy, image_folder)"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::SyntheticToy => "synthetic_toy",
            DatasetKind::ImageFolder => "image_folder",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory of PNG files, for `image_folder`.
    pub path: String,
    /// Number of training images (toy data; folders use what is left after
    /// the test split).
    pub train_size: usize,
    pub test_size: usize,
    pub resolution: usize,
    pub channels: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { kind: DatasetKind::SyntheticToy, path: String::new(), train_size: 2000, test_size: 2000, resolution: 8, channels: 3 }
    }
}

impl DatasetConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("kind", self.kind);
        m.insert("path", &self.path);
        m.insert("train_size", self.train_size);
        m.insert("test_size", self.test_size);
        m.insert("resolution", self.resolution);
        m.insert("channels", self.channels);
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = DatasetConfig::default();
        Ok(DatasetConfig {
            kind: m.parse_or("kind", d.kind)?,
            path: m.get("path").unwrap_or_default().to_string(),
            train_size: m.parse_or("train_size", d.train_size)?,
            test_size: m.parse_or("test_size", d.test_size)?,
            resolution: m.parse_or("resolution", d.resolution)?,
            channels: m.parse_or("channels", d.channels)?,
        })
    }
}

/// How the training split is corrupted.
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub noise: Option<NoiseSpec>,
    /// Second noise type; enables mixed mode.
    pub noise_b: Option<NoiseSpec>,
    /// Fraction of training images that are corrupted.
    pub rate: f64,
    /// In mixed mode, the fraction of corrupted images that use `noise_b`.
    pub mixture_rate: f64,
}

impl Corruption {
    pub fn clean() -> Self {
        Corruption { noise: None, noise_b: None, rate: 0.0, mixture_rate: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("noise_rate", self.rate), ("mixture_rate", self.mixture_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid("corruption", format!("{name} {v} must lie in [0, 1]")));
            }
        }
        if self.noise_b.is_some() && self.noise.is_none() {
            return Err(invalid("corruption", "mixed mode needs both noise specs"));
        }
        if self.mixture_rate > 0.0 && self.noise_b.is_none() {
            return Err(invalid("corruption", "mixture_rate > 0 needs a second noise spec"));
        }
        Ok(())
    }
}

/// Mixes `(seed, stream, index)` into an independent 64-bit seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0xd134_2543_de82_ef95) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_SELECT: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_NOISE_PAIR: u64 = 5;
const STREAM_SHUFFLE: u64 = 6;
pub(crate) const STREAM_TEST_NOISE: u64 = 7;

/// One toy image in `[-1, 1]`, with probability 1/2 each:
///
/// - a dark, wide rectangle in the upper half of a bright background;
/// - a linear gradient from a bright top-left side to a dark far side, at an
///   angle within the first quadrant.
///
/// Colours are a luminance plus a warm tint (`+t` on the first channel, `-t`
/// on the last). None of rotation, channel permutation or sign inversion
/// maps the distribution onto itself, so it is not confusable with noise
/// that is invariant under those transforms.
pub fn toy_image<R: Rng + ?Sized>(res: usize, channels: usize, rng: &mut R) -> Vec<f32> {
    let color = |lum: f32, tint: f32| -> Vec<f32> {
        (0..channels)
            .map(|c| match c {
                _ if channels == 1 => lum,
                0 => lum + tint,
                c if c == channels - 1 => lum - tint,
                _ => lum,
            })
            .collect()
    };
    let tint = rng.random_range(0.0f32..=0.2);
    let bright = color(rng.random_range(0.1f32..=0.6), tint);
    let dark = color(rng.random_range(-0.6f32..=-0.1), tint);
    let mut img = vec![0.0f32; res * res * channels];
    if rng.random_bool(0.5) {
        let h = rng.random_range((res / 4).max(1)..=res / 2 - 1);
        let w = rng.random_range(h + 2..=res - 1);
        let (y0, x0) = (rng.random_range(0..=res / 2 - h), rng.random_range(0..=res - w));
        for y in 0..res {
            for x in 0..res {
                let inside = (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x);
                let c = if inside { &dark } else { &bright };
                img[(y * res + x) * channels..][..channels].copy_from_slice(c);
            }
        }
    } else {
        let theta = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
        let (dx, dy) = (theta.cos(), theta.sin());
        let span = (res.max(2) - 1) as f64 * (dx + dy);
        for y in 0..res {
            for x in 0..res {
                let t = ((x as f64 * dx + y as f64 * dy) / span) as f32;
                for c in 0..channels {
                    img[(y * res + x) * channels + c] = bright[c] + (dark[c] - bright[c]) * t;
                }
            }
        }
    }
    img
}

pub fn toy_batch<R: Rng + ?Sized>(n: usize, res: usize, channels: usize, rng: &mut R) -> ImageBatch {
    let data = (0..n).flat_map(|_| toy_image(res, channels, rng)).collect();
    ImageBatch::new(data, [n, res, res, channels], ValueRange::SymmetricUnit).expect("toy images are finite")
}

/// Samples the exact toy distribution and the exact noise law; a stand-in
/// for perfectly trained generators.
#[derive(Debug, Clone)]
pub struct ToyOracle {
    pub resolution: usize,
    pub channels: usize,
    pub noise: NoiseSpec,
}

impl PairSampler for ToyOracle {
    fn sample_clean_noise(&self, n: usize, rng: &mut dyn RngCore) -> Result<(ImageBatch, ImageBatch)> {
        let x = toy_batch(n, self.resolution, self.channels, rng);
        let (noise, _) = noise::sample_noise(&self.noise, &x, rng)?;
        Ok((x, noise))
    }
}

/// One image file of any size as a single-image `[-1, 1]` batch.
pub fn load_image(path: &Path, channels: usize) -> Result<ImageBatch> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(invalid("image", format!("{c} channels unsupported (1 or 3)"))),
    };
    ImageBatch::new(raw.iter().map(|&v| v as f32 / 127.5 - 1.0).collect(), [1, h, w, channels], ValueRange::SymmetricUnit)
}

/// PNG files of `dir` in name order, as `[-1, 1]` images.
pub fn load_image_folder(dir: &Path, resolution: usize, channels: usize) -> Result<(ImageBatch, Vec<String>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut data = Vec::new();
    let mut names = Vec::new();
    for f in &files {
        let img = load_image(f, channels)?;
        let [_, h, w, _] = img.shape();
        if h != resolution || w != resolution {
            return Err(invalid("image folder", format!("{} is {w}x{h}, expected {resolution}x{resolution}", f.display())));
        }
        data.extend_from_slice(img.data());
        names.push(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    if names.is_empty() {
        return Err(invalid("image folder", format!("no PNG files in {}", dir.display())));
    }
    Ok((ImageBatch::new(data, [names.len(), resolution, resolution, channels], ValueRange::SymmetricUnit)?, names))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub source: String,
    pub split: Split,
    /// Applied corruption, or `clean`.
    pub noise: String,
    /// Seed of the corruption draw, for corrupted images.
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub corrupted: usize,
    pub records: Vec<ImageRecord>,
}

/// Materialized dataset; every batch uses `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train_clean: ImageBatch,
    /// Training observations: one frozen realization per corrupted image.
    pub train: ImageBatch,
    /// Always clean.
    pub test: ImageBatch,
    specs: [Option<NoiseSpec>; 2],
    /// Per training image, which spec corrupted it.
    assignment: Vec<Option<usize>>,
}

pub fn build_dataset(cfg: &DatasetConfig, corruption: &Corruption, seed: u64) -> Result<Dataset> {
    corruption.validate()?;
    let (res, ch) = (cfg.resolution, cfg.channels);
    for spec in corruption.noise.iter().chain(&corruption.noise_b) {
        spec.validate_for(res, res)?;
    }
    let (train_clean, test, train_names, test_names) = match cfg.kind {
        DatasetKind::SyntheticToy => {
            if cfg.train_size == 0 || cfg.test_size == 0 {
                return Err(invalid("dataset", "train_size and test_size must be positive"));
            }
            let gen = |stream: u64, n: usize| {
                let data = (0..n)
                    .flat_map(|i| toy_image(res, ch, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, i as u64))))
                    .collect();
                ImageBatch::new(data, [n, res, res, ch], ValueRange::SymmetricUnit).expect("finite")
            };
            let names = |tag: &str, n: usize| (0..n).map(|i| format!("toy:{tag}:{i}")).collect::<Vec<_>>();
            (gen(STREAM_TRAIN, cfg.train_size), gen(STREAM_TEST, cfg.test_size), names("train", cfg.train_size), names("test", cfg.test_size))
        }
        DatasetKind::ImageFolder => {
            let (all, names) = load_image_folder(Path::new(&cfg.path), res, ch)?;
            if all.len() <= cfg.test_size {
                return Err(invalid("dataset", format!("{} images leave nothing for training after a test split of {}", all.len(), cfg.test_size)));
            }
            let mut order: Vec<usize> = (0..all.len()).collect();
            let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE, 0));
            for i in (1..order.len()).rev() {
                order.swap(i, shuffle.random_range(0..=i));
            }
            let (te, tr) = order.split_at(cfg.test_size);
            let pick = |idx: &[usize]| idx.iter().map(|&i| names[i].clone()).collect::<Vec<_>>();
            (all.select(tr), all.select(te), pick(tr), pick(te))
        }
    };

    let n = train_clean.len();
    let mut assignment = vec![None; n];
    let corrupted = if corruption.noise.is_some() { (corruption.rate * n as f64).round() as usize } else { 0 };
    let mut select = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SELECT, 0));
    let mut chosen = index::sample(&mut select, n, corrupted).into_vec();
    chosen.sort_unstable();
    let to_b = if corruption.noise_b.is_some() { (corruption.mixture_rate * corrupted as f64).round() as usize } else { 0 };
    let b_positions: Vec<usize> = index::sample(&mut select, corrupted, to_b).into_vec();
    for &i in &chosen {
        assignment[i] = Some(0);
    }
    for &p in &b_positions {
        assignment[chosen[p]] = Some(1);
    }
    let specs = [corruption.noise.clone(), corruption.noise_b.clone()];

    let mut train_data = Vec::with_capacity(train_clean.data().len());
    let mut records = Vec::with_capacity(n + test.len());
    for i in 0..n {
        let x = train_clean.select(&[i]);
        match assignment[i] {
            Some(k) => {
                let spec = specs[k].as_ref().expect("assigned spec exists");
                let s = derive_seed(seed, STREAM_NOISE, i as u64);
                let (_, y) = noise::sample_noise(spec, &x, &mut ChaCha8Rng::seed_from_u64(s))?;
                train_data.extend_from_slice(y.data());
                records.push(ImageRecord { source: train_names[i].clone(), split: Split::Train, noise: spec.to_string(), noise_seed: Some(s) });
            }
            None => {
                train_data.extend_from_slice(x.data());
                records.push(ImageRecord { source: train_names[i].clone(), split: Split::Train, noise: "clean".into(), noise_seed: None });
            }
        }
    }
    for name in test_names {
        records.push(ImageRecord { source: name, split: Split::Test, noise: "clean".into(), noise_seed: None });
    }
    let train = ImageBatch::new(train_data, train_clean.shape(), ValueRange::SymmetricUnit)?;
    Ok(Dataset { manifest: DatasetManifest { seed, corrupted, records }, train_clean, train, test, specs, assignment })
}

impl Dataset {
    /// A second, independent realization of every corrupted training image
    /// (clean images stay clean).
    pub fn second_realization(&self) -> Result<ImageBatch> {
        let mut data = Vec::with_capacity(self.train.data().len());
        for (i, a) in self.assignment.iter().enumerate() {
            let x = self.train_clean.select(&[i]);
            match a {
                Some(k) => {
                    let spec = self.specs[*k].as_ref().expect("assigned spec exists");
                    let mut r = ChaCha8Rng::seed_from_u64(derive_seed(self.manifest.seed, STREAM_NOISE_PAIR, i as u64));
                    data.extend_from_slice(noise::sample_noise(spec, &x, &mut r)?.1.data());
                }
                None => data.extend_from_slice(x.data()),
            }
        }
        ImageBatch::new(data, self.train.shape(), ValueRange::SymmetricUnit)
    }

    /// Test images corrupted with the primary spec, one frozen draw each.
    pub fn noisy_test(&self) -> Result<Option<ImageBatch>> {
        let Some(spec) = &self.specs[0] else { return Ok(None) };
        let mut data = Vec::with_capacity(self.test.data().len());
        for i in 0..self.test.len() {
            let mut r = ChaCha8Rng::seed_from_u64(derive_seed(self.manifest.seed, STREAM_TEST_NOISE, i as u64));
            data.extend_from_slice(noise::sample_noise(spec, &self.test.select(&[i]), &mut r)?.1.data());
        }
        Ok(Some(ImageBatch::new(data, self.test.shape(), ValueRange::SymmetricUnit)?))
    }

    pub fn noise_spec(&self) -> Option<&NoiseSpec> {
        self.specs[0].as_ref()
    }

    pub fn corrupted_count(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseVariant;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn cfg(n: usize) -> DatasetConfig {
        DatasetConfig { train_size: n, test_size: 20, ..DatasetConfig::default() }
    }

    fn with_rate(rate: f64) -> Corruption {
        Corruption { noise: Some(NoiseSpec::preset(NoiseVariant::A)), noise_b: None, rate, mixture_rate: 0.0 }
    }

    #[test]
    fn corruption_counts_follow_rate() {
        for (rate, want) in [(0.0, 0), (1.0, 1000), (0.75, 750), (0.25, 250)] {
            let d = build_dataset(&cfg(1000), &with_rate(rate), 3).unwrap();
            assert_eq!(d.corrupted_count(), want);
            assert_eq!(d.manifest.corrupted, want);
            let noisy = d.manifest.records.iter().filter(|r| r.noise != "clean").count();
            assert_eq!(noisy, want);
        }
    }

    #[test]
    fn mixed_mode_splits_corrupted_images() {
        let c = Corruption {
            noise: Some(NoiseSpec::preset(NoiseVariant::A)),
            noise_b: Some(NoiseSpec::preset(NoiseVariant::G)),
            rate: 1.0,
            mixture_rate: 0.25,
        };
        let d = build_dataset(&cfg(400), &c, 1).unwrap();
        let b = NoiseSpec::preset(NoiseVariant::G).to_string();
        assert_eq!(d.manifest.records.iter().filter(|r| r.noise == b).count(), 100);
        assert!(build_dataset(&cfg(10), &Corruption { noise: None, ..c.clone() }, 1).is_err());
        assert!(build_dataset(&cfg(10), &Corruption { rate: 1.5, ..c }, 1).is_err());
    }

    #[test]
    fn test_split_is_clean_and_clean_images_untouched() {
        let d = build_dataset(&cfg(50), &with_rate(0.5), 9).unwrap();
        assert!(d.manifest.records.iter().filter(|r| r.split == Split::Test).all(|r| r.noise == "clean"));
        for (i, r) in d.manifest.records.iter().take(50).enumerate() {
            let same = d.train.image(i) == d.train_clean.image(i);
            assert_eq!(same, r.noise == "clean");
        }
        assert!(d.test.within_range());
        let pair = d.second_realization().unwrap();
        for (i, r) in d.manifest.records.iter().take(50).enumerate() {
            assert_eq!(pair.image(i) == d.train.image(i), r.noise == "clean");
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(build_dataset(&cfg(0), &Corruption::clean(), 0).is_err());
    }

    #[test]
    fn toy_images_stay_in_range_and_have_two_tones_or_a_ramp() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let img = toy_image(8, 3, &mut r);
            assert!(img.iter().all(|v| (-0.8..=0.8).contains(v)));
            let green = |y: usize| (0..8).map(|x| img[(y * 8 + x) * 3 + 1]).collect::<Vec<_>>();
            let lum = |y: usize| green(y).iter().sum::<f32>();
            let bright_bottom = green(7).iter().all(|&v| v > 0.0 && v == green(7)[0]);
            let ramp = (0..7).all(|y| lum(y + 1) <= lum(y) + 1e-5);
            assert!(bright_bottom || ramp);
            assert!(img.chunks(3).all(|p| p[0] >= p[2]), "warm tint");
        }
    }

    #[test]
    fn image_folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..5u8 {
            let img = image::RgbImage::from_fn(4, 4, |x, y| image::Rgb([i * 40, (x * 60) as u8, (y * 60) as u8]));
            img.save(dir.path().join(format!("{i}.png"))).unwrap();
        }
        let (b, names) = load_image_folder(dir.path(), 4, 3).unwrap();
        assert_eq!(b.shape(), [5, 4, 4, 3]);
        assert_eq!(names[0], "0.png");
        assert_eq!(b.image(1)[0], 40.0 / 127.5 - 1.0);
        let c = DatasetConfig { kind: DatasetKind::ImageFolder, path: dir.path().display().to_string(), test_size: 2, resolution: 4, ..DatasetConfig::default() };
        let d = build_dataset(&c, &Corruption::clean(), 0).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (3, 2));
        assert!(load_image_folder(dir.path(), 8, 3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn build_is_a_pure_function_of_config_and_seed(seed in 0u64..1000, rate in 0.0f64..=1.0) {
            let a = build_dataset(&cfg(30), &with_rate(rate), seed).unwrap();
            let b = build_dataset(&cfg(30), &with_rate(rate), seed).unwrap();
            prop_assert_eq!(&a.manifest, &b.manifest);
            prop_assert_eq!(a.train.data(), b.train.data());
            prop_assert_eq!(a.test.data(), b.test.data());
        }
    }
}
