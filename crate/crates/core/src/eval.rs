//! Fréchet distance over a pluggable feature extractor, and PSNR.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TensorData};
use crate::error::{invalid, Error, Result};
use crate::image::{ImageBatch, ValueRange};
use crate::nn::{self, ParamSet};

pub const STATS_KIND: &str = "feature_stats";
pub const EXTRACTOR_KIND: &str = "feature_extractor";

/// Deterministic map from images to `[N, d]` features.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    /// Identifies the exact mapping; stats from different fingerprints are
    /// not comparable.
    fn fingerprint(&self) -> String;
    /// Row-major `[N, dim]` features.
    fn extract(&self, images: &ImageBatch) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExtractorSource {
    /// Frozen weights drawn from a seed.
    RandomProjection { seed: u64 },
    /// Weights loaded from a container file.
    External,
}

/// Two 3x3 convolutions with ReLU, a 2x2 average pool between them, then
/// global average pooling.
#[derive(Debug, Clone)]
pub struct ConvFeatureNet {
    pub source: ExtractorSource,
    pub channels: usize,
    pub hidden: usize,
    pub dim: usize,
    params: ParamSet<f32>,
    fingerprint: String,
}

impl ConvFeatureNet {
    pub const DEFAULT_DIM: usize = 64;
    const HIDDEN: usize = 48;

    /// He-normal weights from `seed`, zero biases. Half of the first-layer
    /// filters are made zero-mean over their taps, so the features respond
    /// to texture and noise and not only to colour.
    pub fn random(channels: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let hidden = Self::HIDDEN;
        for (name, fan_in, cout) in [("conv1", 9 * channels, hidden), ("conv2", 9 * hidden, dim)] {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let mut w: Vec<f32> = (0..fan_in * cout).map(|_| normal.sample(&mut rng) as f32).collect();
            if name == "conv1" {
                for o in 0..cout / 2 {
                    for ci in 0..channels {
                        let at = |tap: usize| (tap * channels + ci) * cout + o;
                        let mean = (0..9).map(|t| w[at(t)]).sum::<f32>() / 9.0;
                        (0..9).for_each(|t| w[at(t)] -= mean);
                    }
                }
            }
            params.push(format!("{name}.weight"), w, &[fan_in, cout]);
            params.push(format!("{name}.bias"), vec![0.0; cout], &[cout]);
        }
        Self::assemble(ExtractorSource::RandomProjection { seed }, channels, hidden, dim, params)
    }

    fn assemble(source: ExtractorSource, channels: usize, hidden: usize, dim: usize, params: ParamSet<f32>) -> Self {
        let mut h = Sha256::new();
        h.update(format!("conv3(half zero-mean)-relu-avgpool2-conv3-relu-gap;c={channels};h={hidden};d={dim}").as_bytes());
        for t in params.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        let fingerprint = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        ConvFeatureNet { source, channels, hidden, dim, params, fingerprint }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "channels": self.channels, "hidden": self.hidden, "dim": self.dim });
        let mut ck = Checkpoint::new(EXTRACTOR_KIND, meta);
        ck.put_params("net", &self.params);
        ck
    }

    /// Load user-supplied weights for the same layout.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(EXTRACTOR_KIND)?;
        let get = |k: &str| ck.meta[k].as_u64().map(|v| v as usize).ok_or_else(|| Error::Checkpoint(format!("extractor meta lacks {k}")));
        let (channels, hidden, dim) = (get("channels")?, get("hidden")?, get("dim")?);
        let mut params = ParamSet::new();
        for (name, fan_in, cout) in [("conv1", 9 * channels, hidden), ("conv2", 9 * hidden, dim)] {
            params.push(format!("{name}.weight"), vec![0.0; fan_in * cout], &[fan_in, cout]);
            params.push(format!("{name}.bias"), vec![0.0; cout], &[cout]);
        }
        ck.load_params("net", &mut params)?;
        Ok(Self::assemble(ExtractorSource::External, channels, hidden, dim, params))
    }
}

impl FeatureExtractor for ConvFeatureNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn extract(&self, images: &ImageBatch) -> Result<Vec<f64>> {
        let [_, h, w, c] = images.shape();
        if c != self.channels {
            return Err(Error::Shape(format!("extractor takes {} channels, got {c}", self.channels)));
        }
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("extractor input", format!("{h}x{w} must be even-sized")));
        }
        let x = images.to_range(ValueRange::SymmetricUnit).to_tensor::<f32>();
        let p = &self.params;
        let a = nn::conv2d(&x, p.get(0), p.get(1), 3).relu();
        let b = nn::conv2d(&nn::avgpool2(&a), p.get(2), p.get(3), 3).relu();
        Ok(nn::global_avg(&b).data().iter().map(|&v| v as f64).collect())
    }
}

/// Streaming mean / covariance accumulator with an associative merge.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    dim: usize,
    n: usize,
    mean: Vec<f64>,
    /// Sum of centred outer products.
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        StatsAccumulator { dim, n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim * dim] }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.dim, "feature length mismatch");
        self.n += 1;
        let k = self.n as f64;
        let delta: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / k;
        }
        for i in 0..self.dim {
            let di = v[i] - self.mean[i];
            for j in 0..self.dim {
                self.m2[i * self.dim + j] += delta[j] * di;
            }
        }
    }

    /// Push every row of a row-major `[N, dim]` block.
    pub fn extend(&mut self, rows: &[f64]) {
        for r in rows.chunks_exact(self.dim) {
            self.push(r);
        }
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        assert_eq!(self.dim, other.dim, "feature length mismatch");
        if other.n == 0 {
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..self.dim {
            self.mean[i] += delta[i] * nb / n;
            for j in 0..self.dim {
                self.m2[i * self.dim + j] += other.m2[i * self.dim + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        self.n += other.n;
    }

    pub fn finish(&self, fingerprint: &str) -> Result<FeatureStats> {
        if self.n < 2 {
            return Err(Error::Stats(format!("need at least 2 samples, have {}", self.n)));
        }
        let d = self.dim;
        let mut cov: Vec<f64> = self.m2.iter().map(|v| v / (self.n - 1) as f64).collect();
        for i in 0..d {
            for j in 0..i {
                let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
                cov[i * d + j] = s;
                cov[j * d + i] = s;
            }
        }
        Ok(FeatureStats { mean: self.mean.clone(), cov, n: self.n, fingerprint: fingerprint.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`, unbiased.
    pub cov: Vec<f64>,
    pub n: usize,
    pub fingerprint: String,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let d = self.dim();
        let meta = serde_json::json!({ "d": d, "n": self.n, "fingerprint": self.fingerprint });
        let mut ck = Checkpoint::new(STATS_KIND, meta);
        ck.push("mean", &[d], TensorData::F64(self.mean.clone()));
        ck.push("cov", &[d, d], TensorData::F64(self.cov.clone()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(STATS_KIND)?;
        let bad = || Error::Checkpoint("malformed feature stats".into());
        let d = ck.meta["d"].as_u64().ok_or_else(bad)? as usize;
        let n = ck.meta["n"].as_u64().ok_or_else(bad)? as usize;
        let fingerprint = ck.meta["fingerprint"].as_str().ok_or_else(bad)?.to_string();
        let (Some((_, TensorData::F64(mean))), Some((_, TensorData::F64(cov)))) = (ck.get("mean"), ck.get("cov")) else {
            return Err(bad());
        };
        if mean.len() != d || cov.len() != d * d {
            return Err(bad());
        }
        Ok(FeatureStats { mean: mean.clone(), cov: cov.clone(), n, fingerprint })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Feature statistics of `images`, extracted in chunks.
pub fn feature_stats(images: &ImageBatch, extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    let mut acc = StatsAccumulator::new(extractor.dim());
    for start in (0..images.len()).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(images.len())).collect();
        acc.extend(&extractor.extract(&images.select(&idx))?);
    }
    acc.finish(&extractor.fingerprint())
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()));
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `|m_r - m_g|^2 + Tr(C_r + C_g - 2 (C_r C_g)^(1/2))`.
///
/// The trace of the square root is taken as the trace of
/// `(C_r^(1/2) C_g C_r^(1/2))^(1/2)`, which has the same spectrum and is
/// symmetric; negative eigenvalues are clamped to zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.fingerprint != b.fingerprint {
        return Err(Error::Stats(format!("extractor fingerprints differ ({} vs {})", short(&a.fingerprint), short(&b.fingerprint))));
    }
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(Error::Stats(format!("dimension mismatch: {d} vs {}", b.dim())));
    }
    if ![&a.mean, &a.cov, &b.mean, &b.cov].iter().all(|v| v.iter().all(|x| x.is_finite())) {
        return Err(Error::Stats("non-finite statistics".into()));
    }
    let ca = DMatrix::from_row_slice(d, d, &a.cov);
    let cb = DMatrix::from_row_slice(d, d, &b.cov);
    let ra = sym_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0))
}

fn short(f: &str) -> &str {
    &f[..f.len().min(12)]
}

/// `10 log10(peak^2 / MSE)`; infinite when the images match exactly.
pub fn psnr(reference: &[f32], estimate: &[f32], peak: f64) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::Shape(format!("psnr over {} vs {} values", reference.len(), estimate.len())));
    }
    let mse = reference.iter().zip(estimate).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / reference.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

/// Mean of the per-image PSNRs, with `peak` the width of the batches' range.
pub fn mean_psnr(reference: &ImageBatch, estimate: &ImageBatch) -> Result<f64> {
    if reference.shape() != estimate.shape() || reference.range() != estimate.range() {
        return Err(Error::Shape(format!("psnr between {:?} and {:?} batches", reference.shape(), estimate.shape())));
    }
    if reference.is_empty() {
        return Err(Error::Shape("psnr over an empty batch".into()));
    }
    let peak = reference.range().width() as f64;
    let mut total = 0.0;
    for i in 0..reference.len() {
        total += psnr(reference.image(i), estimate.image(i), peak)?;
    }
    Ok(total / reference.len() as f64)
}

/// FID between two image sets under one extractor.
pub fn fid(real: &ImageBatch, fake: &ImageBatch, extractor: &dyn FeatureExtractor) -> Result<f64> {
    frechet_distance(&feature_stats(real, extractor)?, &feature_stats(fake, extractor)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn stats_of(rows: &[Vec<f64>]) -> FeatureStats {
        let mut acc = StatsAccumulator::new(rows[0].len());
        rows.iter().for_each(|r| acc.push(r));
        acc.finish("t").unwrap()
    }

    fn diag(mean: Vec<f64>, var: &[f64]) -> FeatureStats {
        let d = var.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = var[i];
        }
        FeatureStats { mean, cov, n: 10, fingerprint: "t".into() }
    }

    #[test]
    fn identical_rows_have_zero_covariance() {
        let s = stats_of(&vec![vec![0.3, -1.0, 2.0]; 7]);
        assert!(s.cov.iter().all(|&v| v.abs() < 1e-15));
        assert!(StatsAccumulator::new(2).finish("t").is_err());
    }

    #[test]
    fn covariance_matches_two_pass_formula() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| r.random_range(-2.0..5.0)).collect()).collect();
        let s = stats_of(&rows);
        let n = rows.len() as f64;
        for i in 0..3 {
            let mi = rows.iter().map(|v| v[i]).sum::<f64>() / n;
            assert!((s.mean[i] - mi).abs() < 1e-12);
            for j in 0..3 {
                let mj = rows.iter().map(|v| v[j]).sum::<f64>() / n;
                let c = rows.iter().map(|v| (v[i] - mi) * (v[j] - mj)).sum::<f64>() / (n - 1.0);
                assert!((s.cov[i * 3 + j] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_of_halves_matches_single_pass() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<f64> = (0..400 * 4).map(|_| r.sample::<f64, _>(StandardNormal) * 3.0 + 1.0).collect();
        let mut whole = StatsAccumulator::new(4);
        whole.extend(&rows);
        let mut a = StatsAccumulator::new(4);
        a.extend(&rows[..123 * 4]);
        let mut b = StatsAccumulator::new(4);
        b.extend(&rows[123 * 4..]);
        a.merge(&b);
        let (x, y) = (whole.finish("t").unwrap(), a.finish("t").unwrap());
        for (p, q) in x.mean.iter().chain(&x.cov).zip(y.mean.iter().chain(&y.cov)) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn standard_normal_mean_within_clt_bound() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut acc = StatsAccumulator::new(8);
        for _ in 0..10_000 {
            let v: Vec<f64> = (0..8).map(|_| r.sample(StandardNormal)).collect();
            acc.push(&v);
        }
        let s = acc.finish("t").unwrap();
        assert!(s.mean.iter().all(|m| m.abs() < 4.0 / 100.0));
    }

    #[test]
    fn frechet_closed_forms() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let s = stats_of(&rows);
        assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-8);

        let mu = vec![0.5, -1.0, 2.0];
        let got = frechet_distance(&diag(vec![0.0; 3], &[1.0; 3]), &diag(mu.clone(), &[1.0; 3])).unwrap();
        assert!((got - mu.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-10);

        let (a, b) = ([0.5, 2.0, 9.0, 0.0], [1.5, 0.25, 4.0, 3.0]);
        let want: f64 = a.iter().zip(&b).map(|(x, y): (&f64, &f64)| (x.sqrt() - y.sqrt()).powi(2)).sum();
        let got = frechet_distance(&diag(vec![0.1; 4], &a), &diag(vec![0.1; 4], &b)).unwrap();
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn frechet_symmetric_and_monotone_in_mean_shift() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let a = stats_of(&(0..60).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect::<Vec<_>>());
        let b = stats_of(&(0..60).map(|_| (0..4).map(|_| r.random_range(-0.5..2.0)).collect()).collect::<Vec<_>>());
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8);
        let mut last = -1.0;
        for k in 0..8 {
            let mut shifted = a.clone();
            shifted.mean.iter_mut().for_each(|m| *m += 0.3 * k as f64);
            let f = frechet_distance(&a, &shifted).unwrap();
            assert!(f > last);
            last = f;
        }
    }

    #[test]
    fn frechet_rejects_mismatches() {
        let a = diag(vec![0.0; 2], &[1.0, 1.0]);
        let mut b = diag(vec![0.0; 3], &[1.0, 1.0, 1.0]);
        assert!(frechet_distance(&a, &b).is_err());
        b = diag(vec![0.0; 2], &[1.0, 1.0]);
        b.fingerprint = "other".into();
        assert!(frechet_distance(&a, &b).is_err());
        b.fingerprint = "t".into();
        b.mean[0] = f64::NAN;
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn psnr_examples() {
        let x = vec![0.1f32, -0.2, 0.3, 0.0];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let off: Vec<f32> = x.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&x, &off, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&x, &off[..3], 1.0).is_err());

        let mut r = ChaCha8Rng::seed_from_u64(6);
        let n = 1_000_000;
        let reference = vec![0.0f32; n];
        let est: Vec<f32> = (0..n).map(|_| 0.05 * r.sample::<f32, _>(StandardNormal)).collect();
        let want = 10.0 * (1.0f64 / 0.0025).log10();
        assert!((psnr(&reference, &est, 1.0).unwrap() - want).abs() < 0.1);
    }

    #[test]
    fn mean_psnr_averages_per_image_values() {
        let reference = ImageBatch::zeros([3, 1, 2, 1], ValueRange::HalfUnit);
        let est = ImageBatch::new(vec![0.1, 0.1, 0.01, -0.01, 0.2, 0.0], [3, 1, 2, 1], ValueRange::HalfUnit).unwrap();
        let per = [10.0 * (1.0f64 / 0.01).log10(), 10.0 * (1.0f64 / 1e-4).log10(), 10.0 * (1.0f64 / 0.02).log10()];
        let want = per.iter().sum::<f64>() / 3.0;
        assert!((mean_psnr(&reference, &est).unwrap() - want).abs() < 1e-4);
    }

    #[test]
    fn extractor_is_deterministic_and_fingerprinted() {
        let e = ConvFeatureNet::random(3, 64, 7);
        let imgs = ImageBatch::new((0..2 * 8 * 8 * 3).map(|i| ((i % 13) as f32) / 6.5 - 1.0).collect(), [2, 8, 8, 3], ValueRange::SymmetricUnit).unwrap();
        let f = e.extract(&imgs).unwrap();
        assert_eq!(f.len(), 2 * 64);
        assert_eq!(f, e.extract(&imgs).unwrap());
        assert_eq!(f, e.extract(&imgs.to_range(ValueRange::HalfUnit)).unwrap());
        assert_eq!(e.fingerprint(), ConvFeatureNet::random(3, 64, 7).fingerprint());
        assert_ne!(e.fingerprint(), ConvFeatureNet::random(3, 64, 8).fingerprint());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ext.ckpt");
        e.to_checkpoint().save(&p).unwrap();
        let loaded = ConvFeatureNet::load(&p).unwrap();
        assert_eq!(loaded.fingerprint(), e.fingerprint());
        assert_eq!(loaded.extract(&imgs).unwrap(), f);
    }

    #[test]
    fn stats_round_trip_through_container() {
        let s = diag(vec![0.5, 1.5], &[2.0, 3.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.stats");
        s.save(&p).unwrap();
        assert_eq!(FeatureStats::load(&p).unwrap(), s);
    }
}
