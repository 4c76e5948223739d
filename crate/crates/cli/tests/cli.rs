use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvgaze_core::depth::dpth;
use serde_json::Value;

fn mvgaze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvgaze"))
        .args(args)
        .env_remove("MVGAZE_THREADS")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = mvgaze(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn synth_scene(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join("scene");
    ok_json(&[
        "synth", "--seed", seed, "--cameras", "4", "--width", "256", "--height", "192",
        "--out", out.to_str().unwrap(),
    ]);
    out.join("manifest.json")
}

fn annotations(manifest: &Path) -> Vec<Value> {
    let m: Value = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    m["frames"][0]["annotations"].as_array().unwrap().clone()
}

#[test]
fn fov_peak_lands_on_the_annotated_target() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_scene(tmp.path(), "3");
    let mut checked = 0;
    for ann in annotations(&manifest) {
        if ann["visibility"] != "inside" {
            continue;
        }
        let png = tmp.path().join("fov.png");
        let v = ok_json(&[
            "fov", "--manifest", manifest.to_str().unwrap(),
            "--camera", ann["camera_id"].as_str().unwrap(),
            "--out-png", png.to_str().unwrap(),
        ]);
        let (u, w) = (v["argmax"][0].as_f64().unwrap(), v["argmax"][1].as_f64().unwrap());
        let (tu, tv) = (ann["gaze_point"]["u"].as_f64().unwrap(), ann["gaze_point"]["v"].as_f64().unwrap());
        assert!((u - tu).hypot(w - tv) <= 2.0, "argmax ({u}, {w}) vs target ({tu}, {tv})");
        assert!(png.exists());
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_scene(tmp.path(), "3");
    let cams: Vec<String> = (0..4).map(|i| format!("cam{i}")).collect();
    let mut preds = Vec::new();
    for ann in annotations(&manifest) {
        let inside = !ann["gaze_point"].is_null();
        let point = if inside {
            let (u, v) = (ann["gaze_point"]["u"].as_f64().unwrap(), ann["gaze_point"]["v"].as_f64().unwrap());
            [(u + 0.5) / 256.0, (v + 0.5) / 192.0]
        } else {
            [0.5, 0.5]
        };
        for c in cams.iter().filter(|c| **c != ann["camera_id"]) {
            preds.push(serde_json::json!({
                "primary_image_id": ann["image_id"],
                "reference_camera_id": c,
                "point": point,
                "p_in": if inside { 1.0 } else { 0.0 },
            }));
        }
    }
    let preds_path = tmp.path().join("preds.json");
    std::fs::write(&preds_path, serde_json::to_string(&preds).unwrap()).unwrap();
    let csv = tmp.path().join("metrics.csv");
    let report = ok_json(&[
        "eval", "--manifest", manifest.to_str().unwrap(),
        "--predictions", preds_path.to_str().unwrap(),
        "--out", csv.to_str().unwrap(),
    ]);
    assert_eq!(report["overall"]["dist_mean"].as_f64(), Some(0.0));
    assert_eq!(report["overall"]["ap"].as_f64(), Some(1.0));
    assert!(csv.exists() && csv.with_extension("json").exists());
}

#[test]
fn align_depth_recovers_scale_and_shift() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, h) = (40, 30);
    let abs: Vec<f32> = (0..w * h).map(|i| 1.0 + (i % 17) as f32 * 0.25 + (i / w) as f32 * 0.05).collect();
    let rel: Vec<f32> = abs.iter().map(|d| (d - 0.5) / 2.0).collect();
    let (pa, pr) = (tmp.path().join("abs.dpth"), tmp.path().join("rel.dpth"));
    dpth::write(&pa, w, h, &abs).unwrap();
    dpth::write(&pr, w, h, &rel).unwrap();
    let v = ok_json(&[
        "align-depth", "--relative", pr.to_str().unwrap(), "--absolute", pa.to_str().unwrap(), "--seed", "4",
    ]);
    assert!((v["a"].as_f64().unwrap() - 2.0).abs() < 1e-5);
    assert!((v["b"].as_f64().unwrap() - 0.5).abs() < 1e-5);
}

#[test]
fn toy_training_and_inference_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_scene(tmp.path(), "3");
    let ckpt = tmp.path().join("toy.ckpt");
    let curve = tmp.path().join("curve.csv");
    let report = ok_json(&[
        "train-toy", "--synth-seed", "5", "--pairs", "8", "--steps", "3", "--batch-size", "4", "--seed", "0",
        "--checkpoint", ckpt.to_str().unwrap(), "--curve", curve.to_str().unwrap(),
    ]);
    assert!(report["final"]["total"].as_f64().unwrap().is_finite());
    let lines = std::fs::read_to_string(&curve).unwrap();
    assert_eq!(lines.lines().next(), Some("step,total,heatmap,inout,gaze,grad_norm"));
    assert_eq!(lines.lines().count(), 4);

    let ann = annotations(&manifest).into_iter().find(|a| a["visibility"] == "inside").unwrap();
    let primary = ann["camera_id"].as_str().unwrap();
    let reference = if primary == "cam0" { "cam1" } else { "cam0" };
    let hm = tmp.path().join("hm.png");
    let v = ok_json(&[
        "infer", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(),
        "--primary", primary, "--reference", reference, "--heatmap-png", hm.to_str().unwrap(),
    ]);
    let point = v["point"].as_array().unwrap();
    assert_eq!(point.len(), 2);
    assert!(point.iter().all(|p| (0.0..=1.0).contains(&p.as_f64().unwrap())));
    assert!((0.0..=1.0).contains(&v["p_in"].as_f64().unwrap()));
    assert!(v["sigma_primary"].as_f64().unwrap() > 0.0);
    assert!(v["sigma_reference"].as_f64().unwrap() > 0.0);
    assert!(["primary", "reference"].contains(&v["chosen_view"].as_str().unwrap()));
    assert!(hm.exists());
}

#[test]
fn bad_usage_exits_with_two_and_bad_data_with_one() {
    assert_eq!(mvgaze(&["synth", "--seed", "1", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(mvgaze(&["epipolar", "--manifest", "m", "--from", "a", "--to", "b", "--point", "1"]).status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"no-such-flag": 1}"#).unwrap();
    let out = mvgaze(&["synth", "--seed", "1", "--out", "x", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let missing = tmp.path().join("missing.json");
    let out = mvgaze(&["fov", "--manifest", missing.to_str().unwrap(), "--camera", "cam0", "--out-png", "x.png"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_overrides_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("scene");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"cameras": 3, "no-images": true}"#).unwrap();
    let v = ok_json(&[
        "synth", "--seed", "2", "--width", "128", "--height", "96", "--out", out_dir.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
    ]);
    assert_eq!(v["cameras"].as_u64(), Some(3));
    assert!(!out_dir.join("images").exists());
}

#[test]
fn seeded_commands_are_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    let runs: Vec<PathBuf> = (0..2)
        .map(|i| {
            let dir = tmp.path().join(format!("run{i}"));
            std::fs::create_dir_all(&dir).unwrap();
            ok_json(&[
                "synth", "--seed", "9", "--cameras", "3", "--width", "96", "--height", "72", "--depth-noise", "0.05",
                "--out", dir.join("scene").to_str().unwrap(),
            ]);
            ok_json(&[
                "train-toy", "--synth-seed", "2", "--pairs", "6", "--steps", "2", "--batch-size", "3", "--seed", "1",
                "--threads", "2", "--checkpoint", dir.join("toy.ckpt").to_str().unwrap(),
                "--curve", dir.join("curve.csv").to_str().unwrap(),
            ]);
            dir
        })
        .collect();
    for rel in ["scene/manifest.json", "scene/ground_truth.json", "scene/depth/0_cam1.dpth", "scene/images/0_cam1.png", "toy.ckpt", "curve.csv"] {
        assert_eq!(read(runs[0].join(rel)), read(runs[1].join(rel)), "{rel} differs between runs");
    }
}
