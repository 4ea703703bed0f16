//! C ABI over the noise zoo, trained generators and denoisers, and the
//! evaluation metrics.
//!
//! Every function returns an [`NrganStatus`]; on failure the message is
//! kept per thread and read back with [`nrgan_last_error`]. Handles are
//! opaque and released with their `_free` function. Image buffers are
//! `float` arrays in `[N, H, W, C]` order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nrgan::checkpoint::Checkpoint;
use nrgan::denoise::Denoiser;
use nrgan::eval::{frechet_distance, psnr, FeatureStats};
use nrgan::experiment::sample_bundle;
use nrgan::generators::GeneratorBundle;
use nrgan::image::{ImageBatch, ValueRange};
use nrgan::kv::KvMap;
use nrgan::noise::{sample_noise, NoiseSpec};
use nrgan::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NrganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Diverged = 6,
    Internal = 7,
}

/// A parsed noise specification.
pub struct NrganNoiseSpec {
    spec: NoiseSpec,
}

/// Clean-image and noise generators loaded from a checkpoint.
pub struct NrganGenerator {
    bundle: GeneratorBundle<f32>,
}

/// A trained denoiser loaded from a checkpoint.
pub struct NrganDenoiser {
    denoiser: Denoiser,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> NrganStatus {
    match e {
        Error::Validation { .. } | Error::Precondition(_) | Error::Config(_) => NrganStatus::InvalidArgument,
        Error::Shape(_) => NrganStatus::ShapeMismatch,
        Error::Io(_) | Error::Image(_) => NrganStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => NrganStatus::Checkpoint,
        Error::Diverged { .. } => NrganStatus::Diverged,
        Error::Stats(_) => NrganStatus::InvalidArgument,
    }
}

struct Fail(NrganStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NrganStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NrganStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NrganStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(NrganStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(NrganStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn numel(n: usize, h: usize, w: usize, c: usize) -> Result<usize, Fail> {
    [n, h, w, c]
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .filter(|&v| v > 0)
        .ok_or_else(|| Fail(NrganStatus::InvalidArgument, format!("bad image shape {n}x{h}x{w}x{c}")))
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nrgan_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nrgan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Parse a noise spec from flat `key = value` text (one entry per line, or
/// comma separated), e.g. `variant = A` / `sigma = 25`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nrgan_noise_spec_parse(text: *const c_char, out: *mut *mut NrganNoiseSpec) -> NrganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let t = c_str(text, "text")?.replace(',', "\n");
        let spec = NoiseSpec::from_kv(&KvMap::parse(&t)?)?;
        *out = Box::into_raw(Box::new(NrganNoiseSpec { spec }));
        Ok(())
    })
}

/// # Safety
/// `spec` must be null or a handle from [`nrgan_noise_spec_parse`], freed once.
#[no_mangle]
pub unsafe extern "C" fn nrgan_noise_spec_free(spec: *mut NrganNoiseSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Corrupt clean `[-1, 1]` images `x`; writes the noise and `y = x + n`.
///
/// # Safety
/// `x`, `noise_out` and `y_out` must each hold `n*h*w*c` floats.
#[no_mangle]
pub unsafe extern "C" fn nrgan_sample_noise(
    spec: *const NrganNoiseSpec,
    x: *const f32,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
    noise_out: *mut f32,
    y_out: *mut f32,
) -> NrganStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(|| null("spec"))?;
        let len = numel(n, h, w, c)?;
        let x = ImageBatch::new(slice(x, len, "x")?.to_vec(), [n, h, w, c], ValueRange::SymmetricUnit)?;
        let (noise, y) = sample_noise(&spec.spec, &x, &mut ChaCha8Rng::seed_from_u64(seed))?;
        slice_mut(noise_out, len, "noise_out")?.copy_from_slice(noise.data());
        slice_mut(y_out, len, "y_out")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Load a generator bundle (or a GAN training checkpoint).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nrgan_generator_load(path: *const c_char, out: *mut *mut NrganGenerator) -> NrganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(Path::new(c_str(path, "path")?))?;
        let bundle = GeneratorBundle::from_checkpoint(&ck, None)?;
        *out = Box::into_raw(Box::new(NrganGenerator { bundle }));
        Ok(())
    })
}

/// # Safety
/// `gen` must be null or a handle from [`nrgan_generator_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn nrgan_generator_free(gen: *mut NrganGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// Side length and channel count of generated images.
///
/// # Safety
/// `gen` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn nrgan_generator_dims(gen: *const NrganGenerator, resolution: *mut usize, channels: *mut usize) -> NrganStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(|| null("gen"))?;
        *resolution.as_mut().ok_or_else(|| null("resolution"))? = g.bundle.arch.resolution;
        *channels.as_mut().ok_or_else(|| null("channels"))? = g.bundle.arch.channels;
        Ok(())
    })
}

/// Draw `n` EMA samples. `clean_out` receives the clean images;
/// `observed_out`, when not null, the composed observations (an error for
/// variants without a noise model).
///
/// # Safety
/// Each non-null buffer must hold `n * resolution^2 * channels` floats.
#[no_mangle]
pub unsafe extern "C" fn nrgan_generator_sample(
    gen: *const NrganGenerator,
    n: usize,
    seed: u64,
    clean_out: *mut f32,
    observed_out: *mut f32,
) -> NrganStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(|| null("gen"))?;
        let a = &g.bundle.arch;
        let len = numel(n, a.resolution, a.resolution, a.channels)?;
        let s = sample_bundle(&g.bundle, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
        slice_mut(clean_out, len, "clean_out")?.copy_from_slice(s.clean.data());
        if !observed_out.is_null() {
            let obs = s.observed.ok_or_else(|| Fail(NrganStatus::InvalidArgument, format!("variant {} has no noise model", g.bundle.variant())))?;
            slice_mut(observed_out, len, "observed_out")?.copy_from_slice(obs.data());
        }
        Ok(())
    })
}

/// Load a trained denoiser.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nrgan_denoiser_load(path: *const c_char, out: *mut *mut NrganDenoiser) -> NrganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(Path::new(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(NrganDenoiser { denoiser: Denoiser::from_checkpoint(&ck)? }));
        Ok(())
    })
}

/// # Safety
/// `d` must be null or a handle from [`nrgan_denoiser_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn nrgan_denoiser_free(d: *mut NrganDenoiser) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Denoise `[-0.5, 0.5]` images of any size.
///
/// # Safety
/// `y` and `out` must each hold `n*h*w*c` floats.
#[no_mangle]
pub unsafe extern "C" fn nrgan_denoiser_apply(
    d: *const NrganDenoiser,
    y: *const f32,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    out: *mut f32,
) -> NrganStatus {
    guard(|| {
        let d = d.as_ref().ok_or_else(|| null("denoiser"))?;
        let len = numel(n, h, w, c)?;
        let y = ImageBatch::new(slice(y, len, "y")?.to_vec(), [n, h, w, c], ValueRange::HalfUnit)?;
        slice_mut(out, len, "out")?.copy_from_slice(d.denoiser.denoise(&y)?.data());
        Ok(())
    })
}

/// PSNR in dB between two buffers of `len` values; `+inf` when identical.
///
/// # Safety
/// `reference` and `estimate` must hold `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nrgan_psnr(reference: *const f32, estimate: *const f32, len: usize, peak: f64, out: *mut f64) -> NrganStatus {
    guard(|| {
        let v = psnr(slice(reference, len, "reference")?, slice(estimate, len, "estimate")?, peak)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Frechet distance between two Gaussians given by means (`d`) and
/// row-major covariances (`d*d`).
///
/// # Safety
/// Means must hold `d` doubles, covariances `d*d`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nrgan_frechet_distance(
    mean_a: *const f64,
    cov_a: *const f64,
    mean_b: *const f64,
    cov_b: *const f64,
    d: usize,
    out: *mut f64,
) -> NrganStatus {
    guard(|| {
        if d == 0 {
            return Err(Fail(NrganStatus::InvalidArgument, "dimension must be positive".into()));
        }
        let dd = d.checked_mul(d).ok_or_else(|| Fail(NrganStatus::InvalidArgument, "dimension too large".into()))?;
        let stats = |m: *const f64, c: *const f64| -> Result<FeatureStats, Fail> {
            Ok(FeatureStats { mean: slice(m, d, "mean")?.to_vec(), cov: slice(c, dd, "cov")?.to_vec(), n: 2, fingerprint: "c-abi".into() })
        };
        let v = frechet_distance(&stats(mean_a, cov_a)?, &stats(mean_b, cov_b)?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}
