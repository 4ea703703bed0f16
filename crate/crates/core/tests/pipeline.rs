use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use nrgan::data::{DatasetConfig, DatasetKind};
use nrgan::experiment::{build_data, evaluate_run, run_experiment, save_images, ExperimentConfig};
use nrgan::image::ValueRange;
use nrgan::Error;

fn config(dir: &std::path::Path, settings: &[&str]) -> ExperimentConfig {
    let mut s: Vec<String> = [
        "dataset.train_size=64",
        "dataset.test_size=64",
        "eval.fid_samples=64",
        "train.batch_size=8",
        "train.iterations=4",
        "ckpt_every=0",
        "grid_every=0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    s.extend(settings.iter().map(|s| s.to_string()));
    s.push(format!("out_dir={}", dir.display()));
    ExperimentConfig::resolve(None, |_| None, &s).unwrap()
}

#[test]
fn every_variant_trains_on_matching_noise() {
    let cases = [
        ("gan", "A", ""),
        ("p_ambient_gan", "A", ""),
        ("ambient_gan", "A", ""),
        ("si0", "A", ""),
        ("si1", "B", ""),
        ("si2", "G", ""),
        ("sd0", "I", ""),
        ("sd1_mult", "I", ""),
        ("sd1_poisson", "M", "train.filter_mode=blurvh"),
        ("sd2", "K", ""),
        ("sd3", "O", "train.filter_mode=blurvh"),
    ];
    for (variant, noise, extra) in cases {
        let dir = tempfile::tempdir().unwrap();
        let mut s = vec![format!("model.variant={variant}"), format!("noise.variant={noise}")];
        if !extra.is_empty() {
            s.push(extra.to_string());
        }
        let refs: Vec<&str> = s.iter().map(String::as_str).collect();
        let summary = run_experiment(&config(dir.path(), &refs)).unwrap_or_else(|e| panic!("{variant}/{noise}: {e}"));
        assert_eq!(summary.iterations, 4, "{variant}");
        let r = &summary.report;
        assert_eq!(r["variant"], variant);
        assert!(r["fid_clean"].as_f64().unwrap().is_finite());
        assert_eq!(r["fid_observed"].is_null(), variant == "gan", "{variant}");
        assert_eq!(r["sigma_map_mean"].is_null(), !matches!(variant, "si1" | "sd1_mult" | "sd1_poisson" | "sd2"), "{variant}");
        let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 4);
        for l in lines.lines() {
            let v: Value = serde_json::from_str(l).unwrap();
            assert_eq!(v["diverged"], false);
        }
    }
}

#[test]
fn semi_noisy_manifest_counts_follow_the_rates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        &["noise.variant=A", "noise_rate=0.5", "noise_b.variant=I", "mixture_rate=0.25", "dataset.train_size=40"],
    );
    let d = build_data(&cfg).unwrap();
    assert_eq!(d.manifest.corrupted, 20);
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let records = m["records"].as_array().unwrap();
    let train: Vec<&Value> = records.iter().filter(|r| r["split"] == "train").collect();
    assert_eq!(train.len(), 40);
    let count = |tag: &str| train.iter().filter(|r| r["noise"].as_str().unwrap().starts_with(tag)).count();
    assert_eq!(count("clean"), 20);
    assert_eq!(train.len() - count("clean"), 20);
    assert!(records.iter().filter(|r| r["split"] == "test").all(|r| r["noise"] == "clean"));
    assert!(dir.path().join("dataset.ckpt").exists());
}

#[test]
fn image_folder_dataset_trains_and_evaluates() {
    let images = tempfile::tempdir().unwrap();
    let toy = nrgan::data::toy_batch(48, 8, 3, &mut ChaCha8Rng::seed_from_u64(5));
    let names: Vec<String> = (0..48).map(|i| format!("img{i:03}.png")).collect();
    save_images(&toy.to_range(ValueRange::HalfUnit), images.path(), &names).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = format!("dataset.path={}", images.path().display());
    let cfg = config(
        dir.path(),
        &["dataset.kind=image_folder", &path, "dataset.train_size=32", "dataset.test_size=16", "noise.variant=A", "model.variant=si0"],
    );
    assert_eq!(cfg.dataset, DatasetConfig { kind: DatasetKind::ImageFolder, train_size: 32, test_size: 16, path: images.path().display().to_string(), ..DatasetConfig::default() });
    let summary = run_experiment(&cfg).unwrap();
    let again = evaluate_run(&dir.path().join("ckpt").join("final.ckpt"), &cfg).unwrap();
    assert_eq!(again["fid_clean"], summary.report["fid_clean"]);

    let too_many = config(dir.path(), &["dataset.kind=image_folder", &path, "dataset.test_size=48"]);
    assert!(build_data(&too_many).is_err());
}

#[test]
fn denoiser_checkpoint_evaluates_to_the_run_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &["task=denoiser", "noise.variant=A", "denoise.preset=tiny", "denoise.iterations=6", "denoise.scheme=n2v"]);
    let summary = run_experiment(&cfg).unwrap();
    let r = evaluate_run(&dir.path().join("ckpt").join("final.ckpt"), &cfg).unwrap();
    assert_eq!(r["psnr_denoised"], summary.report["psnr_denoised"]);
    assert_eq!(r["psnr_noisy"], summary.report["psnr_noisy"]);
}

#[test]
fn divergent_run_stops_with_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &["noise.variant=A", "model.variant=si1", "train.adam.lr=1e6", "train.r1_gamma=0", "train.iterations=50"]);
    match run_experiment(&cfg) {
        Err(Error::Diverged { .. }) => assert!(dir.path().join("DIVERGED").exists()),
        other => panic!("expected divergence, got {:?}", other.map(|s| s.iterations)),
    }
}
