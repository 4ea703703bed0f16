use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nrgan::denoise::{Denoiser, DenoiserPreset, UNetArch};
use nrgan::generators::{BundleConfig, GeneratorBundle, NetArch, Preset, Variant};
use nrgan_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe { nrgan_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn spec(text: &str) -> *mut NrganNoiseSpec {
    let t = CString::new(text).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { nrgan_noise_spec_parse(t.as_ptr(), &mut out) }, NrganStatus::Ok);
    out
}

#[test]
fn noise_sampling_is_additive_and_seeded() {
    let s = spec("variant = A, sigma = 25");
    let x: Vec<f32> = (0..2 * 4 * 4 * 3).map(|i| (i % 9) as f32 / 9.0 - 0.5).collect();
    let (mut n1, mut y1) = (vec![0.0; x.len()], vec![0.0; x.len()]);
    let (mut n2, mut y2) = (vec![0.0; x.len()], vec![0.0; x.len()]);
    unsafe {
        assert_eq!(nrgan_sample_noise(s, x.as_ptr(), 2, 4, 4, 3, 5, n1.as_mut_ptr(), y1.as_mut_ptr()), NrganStatus::Ok);
        assert_eq!(nrgan_sample_noise(s, x.as_ptr(), 2, 4, 4, 3, 5, n2.as_mut_ptr(), y2.as_mut_ptr()), NrganStatus::Ok);
        nrgan_noise_spec_free(s);
    }
    assert_eq!(n1, n2);
    for i in 0..x.len() {
        assert_eq!(y1[i], x[i] + n1[i]);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    let bad = CString::new("variant = Z").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { nrgan_noise_spec_parse(bad.as_ptr(), &mut out) }, NrganStatus::InvalidArgument);
    assert!(out.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { nrgan_noise_spec_parse(ptr::null(), &mut out) }, NrganStatus::NullPointer);
    assert!(last_error().contains("null"));
    let missing = CString::new("/nonexistent/x.ckpt").unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { nrgan_generator_load(missing.as_ptr(), &mut g) }, NrganStatus::Io);
    let s = spec("variant = A");
    let x = [0.0f32; 4];
    let mut o = [0.0f32; 4];
    let mut o2 = [0.0f32; 4];
    let code = unsafe { nrgan_sample_noise(s, x.as_ptr(), 0, 2, 2, 1, 0, o.as_mut_ptr(), o2.as_mut_ptr()) };
    assert_eq!(code, NrganStatus::InvalidArgument);
    unsafe { nrgan_noise_spec_free(s) };
}

#[test]
fn metrics_match_closed_forms() {
    let a = [0.0f32; 4];
    let b = [0.1f32; 4];
    let mut v = 0.0;
    assert_eq!(unsafe { nrgan_psnr(a.as_ptr(), b.as_ptr(), 4, 1.0, &mut v) }, NrganStatus::Ok);
    assert!((v - 20.0).abs() < 1e-5);
    let (m0, m1) = ([0.0f64, 0.0], [1.0f64, 2.0]);
    let ca = [4.0, 0.0, 0.0, 9.0];
    let cb = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(unsafe { nrgan_frechet_distance(m0.as_ptr(), ca.as_ptr(), m1.as_ptr(), cb.as_ptr(), 2, &mut v) }, NrganStatus::Ok);
    assert!((v - (5.0 + 1.0 + 4.0)).abs() < 1e-9, "{v}");
}

#[test]
fn generator_and_denoiser_handles_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bundle = GeneratorBundle::<f32>::new(BundleConfig::for_variant(Variant::Si1), NetArch::preset(Preset::Tiny, 3), None, &mut rng).unwrap();
    let mut ck = nrgan::checkpoint::Checkpoint::new(nrgan::generators::BUNDLE_KIND, serde_json::json!({ "bundle": bundle.metadata() }));
    bundle.write_into(&mut ck);
    let gpath = dir.path().join("g.ckpt");
    ck.save(&gpath).unwrap();

    let p = CString::new(gpath.to_str().unwrap()).unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { nrgan_generator_load(p.as_ptr(), &mut g) }, NrganStatus::Ok);
    let (mut res, mut ch) = (0usize, 0usize);
    assert_eq!(unsafe { nrgan_generator_dims(g, &mut res, &mut ch) }, NrganStatus::Ok);
    assert_eq!((res, ch), (8, 3));
    let len = 5 * res * res * ch;
    let (mut clean, mut obs) = (vec![0.0f32; len], vec![0.0f32; len]);
    assert_eq!(unsafe { nrgan_generator_sample(g, 5, 1, clean.as_mut_ptr(), obs.as_mut_ptr()) }, NrganStatus::Ok);
    assert!(clean.iter().all(|v| v.abs() < 1.0));
    assert_ne!(clean, obs);
    unsafe { nrgan_generator_free(g) };

    let d = Denoiser::new(&UNetArch::preset(DenoiserPreset::Tiny, 3), &mut rng).unwrap();
    let dpath = dir.path().join("d.ckpt");
    d.to_checkpoint(serde_json::Value::Null).save(&dpath).unwrap();
    let p = CString::new(dpath.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { nrgan_denoiser_load(p.as_ptr(), &mut h) }, NrganStatus::Ok);
    let y = vec![0.1f32; 2 * 5 * 7 * 3];
    let mut out = vec![0.0f32; y.len()];
    assert_eq!(unsafe { nrgan_denoiser_apply(h, y.as_ptr(), 2, 5, 7, 3, out.as_mut_ptr()) }, NrganStatus::Ok);
    assert!(out.iter().all(|v| v.is_finite()));
    assert_eq!(unsafe { nrgan_generator_load(p.as_ptr(), &mut g) }, NrganStatus::Checkpoint);
    unsafe { nrgan_denoiser_free(h) };
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("nrgan.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["nrgan_noise_spec_parse", "nrgan_generator_sample", "nrgan_denoiser_apply", "nrgan_frechet_distance", "NRGAN_STATUS_OK", "typedef struct NrganGenerator NrganGenerator"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let Ok(status) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).status() else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(status.success());
}
