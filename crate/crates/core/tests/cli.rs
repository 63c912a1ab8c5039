use std::path::Path;
use std::process::{Command, Output};

use cvq_core::distortion::GenerationManifest;
use cvq_core::eval::{save_eval_manifest, ManifestRow};
use cvq_core::features::{load_features, save_features, FeatureSequence, Scale};
use cvq_core::model::{save_checkpoint, ModelDims, SequenceModel};
use cvq_core::video::{save_bundle, Fps, VideoTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cvq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvq")).args(args).env("RUST_LOG", "off").output().expect("spawn cvq")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pooled_fixture(dir: &Path, n: usize, seed: u64) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for i in 0..n {
        let q: f32 = rng.random_range(-1.0..1.0);
        for scale in [Scale::Full, Scale::Half] {
            let vals: Vec<f32> = (0..8 * 3).map(|k| q * (k % 3) as f32 + rng.random_range(-0.1..0.1)).collect();
            save_features(&FeatureSequence::new(3, vals, scale).unwrap(), dir.join(format!("v{i}_{}.cvqf", scale.name()))).unwrap();
        }
        rows.push(ManifestRow {
            video_id: format!("v{i}"),
            content_id: format!("c{}", i / 2),
            mos: 3.0 + 2.0 * q as f64,
            feature_path_full: format!("v{i}_full.cvqf").into(),
            feature_path_half: format!("v{i}_half.cvqf").into(),
        });
    }
    let path = dir.join("manifest.csv");
    save_eval_manifest(&rows, &path).unwrap();
    path
}

#[test]
fn self_test_passes() {
    let out = cvq(&["self-test"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 6);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cvq(&[]).status.code(), Some(2));
    assert_eq!(cvq(&["train", "--data", "x.json"]).status.code(), Some(2));
    assert_eq!(cvq(&["precompute-features", "--input", "a", "--out", "b", "--transforms", "maybe"]).status.code(), Some(2));
    // exactly one of --features / --manifest
    assert_eq!(cvq(&["extract", "--ckpt", "m", "--out", "o"]).status.code(), Some(2));
    assert_eq!(cvq(&["extract", "--ckpt", "m", "--out", "o", "--features", "f", "--manifest", "x.csv"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = pooled_fixture(dir.path(), 20, 1);
    let report = dir.path().join("r.json");

    let out = cvq(&["evaluate", "--manifest", &s(&manifest), "--report", &s(&report), "--ratios", "0.7,0.1,0.1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("error:"), "{}", stderr(&out));
    assert!(!report.exists());

    let out = cvq(&["evaluate", "--manifest", &s(&manifest), "--report", &s(&report), "--ratios", "0.8,0.2"]);
    assert_eq!(out.status.code(), Some(1));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 1, "trainin": {}}"#).unwrap();
    let out = cvq(&["--config", &s(&cfg), "self-test"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("trainin"), "{}", stderr(&out));

    let out = cvq(&["evaluate", "--manifest", &s(&dir.path().join("missing.csv")), "--report", &s(&report)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_and_cross_evaluate_pooled_features() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = pooled_fixture(dir.path(), 60, 2);
    let report = dir.path().join("out/report.json");
    let out = cvq(&["--seed", "3", "evaluate", "--manifest", &s(&manifest), "--report", &s(&report), "--splits", "12"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["splits"].as_array().unwrap().len(), 12);
    assert_eq!(r["config"]["seed"], 3);
    assert!(r["median_srocc"].as_f64().unwrap() > 0.8);

    let cross = dir.path().join("cross.json");
    let out = cvq(&["cross-evaluate", "--train", &s(&manifest), "--test", &s(&manifest), "--report", &s(&cross)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let c: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cross).unwrap()).unwrap();
    assert!(c["srocc"].as_f64().unwrap() > 0.9);
}

#[test]
fn generation_features_and_extraction_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let source = VideoTensor::from_fn(320, 240, 6, Fps::integer(30), |t, y, x, c| {
        (0.5 + 0.3 * ((x as f32 * 0.37 + t as f32).sin() * (y as f32 * 0.23).cos()) + 0.05 * c as f32).clamp(0.0, 1.0)
    })
    .unwrap();
    let src = dir.path().join("clip.cvqv");
    save_bundle(&source, &src).unwrap();
    let variants = dir.path().join("variants");
    let out = cvq(&["gen-distortions", "--input", &s(&src), "--out", &s(&variants)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = GenerationManifest::load(variants.join("clip_manifest.json")).unwrap();
    // 30 fps source at the minimum size: {24, 30} fps x scale 1 x 5 CRF levels
    assert_eq!(manifest.entries.len(), 10);
    for e in &manifest.entries {
        assert!(e.path.exists());
        e.class().unwrap();
    }

    let feats = dir.path().join("feats");
    let out = cvq(&["precompute-features", "--input", &s(&manifest.entries[0].path), "--out", &s(&feats), "--transforms", "off"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let full = load_features(feats.join("full_raw.cvqf"), Scale::Full).unwrap();
    let half = load_features(feats.join("half_raw.cvqf"), Scale::Half).unwrap();
    assert_eq!(full.dim(), half.dim());
    assert_eq!(std::fs::read_dir(&feats).unwrap().count(), 2);

    let dims = ModelDims { input_dim: full.dim(), hidden_dim: 6, projector_hidden: 6, output_dim: 3 };
    let ckpt = dir.path().join("m.cvqm");
    save_checkpoint(&SequenceModel::init(dims, &mut ChaCha8Rng::seed_from_u64(0)), &ckpt).unwrap();
    let emb = dir.path().join("emb.json");
    let out = cvq(&["extract", "--ckpt", &s(&ckpt), "--features", &s(&feats), "--out", &s(&emb), "--clip-len", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(&emb).unwrap()).unwrap();
    assert_eq!(v.len(), 12);

    let out = cvq(&["extract", "--ckpt", &s(&ckpt), "--features", &s(&feats), "--out", &s(&emb), "--clip-len", "50"]);
    assert_eq!(out.status.code(), Some(1));
}
