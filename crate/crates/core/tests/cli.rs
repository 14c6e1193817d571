use std::path::Path;
use std::process::{Command, Output};

use denet::density::{DensityGrid, DotAnnotation};
use denet::model::{EnetConfig, EnetModel};
use serde_json::Value;

fn denet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_denet")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_gt_preserves_three_dots() {
    let dir = tempfile::tempdir().unwrap();
    let ann_path = dir.path().join("three.json");
    DotAnnotation::new("three", 40, 30, vec![(1.0, 1.0), (20.5, 14.5), (39.0, 29.0)]).save(&ann_path).unwrap();
    let out = dir.path().join("out");
    let o = denet(&["gen-gt", "--annotation", p(&ann_path), "--out", p(&out), "--sigma", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = DensityGrid::load(&out.join("three.grid")).unwrap();
    assert_eq!((grid.width, grid.height), (40, 30));
    assert!((grid.sum() - 3.0).abs() < 1e-6);
    assert!(out.join("three_density.png").exists());
    let sum = manifest(&out)["results"]["three"]["sum"].as_f64().unwrap();
    assert!((sum - 3.0).abs() < 1e-6);
    assert!(String::from_utf8_lossy(&o.stdout).contains("grid sum 3.000000"));
}

#[test]
fn infer_keeps_odd_extents() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    EnetModel::build(EnetConfig::tiny(), 1).unwrap().save(&ckpt).unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, serde_json::json!({ "model": EnetConfig::tiny() }).to_string()).unwrap();
    let img = dir.path().join("odd.png");
    image::RgbImage::from_fn(70, 65, |x, y| image::Rgb([(x * 3) as u8, (y * 3) as u8, 128])).save(&img).unwrap();
    let out = dir.path().join("out");
    let o = denet(&["infer", "--image", p(&img), "--checkpoint", p(&ckpt), "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = DensityGrid::load(&out.join("odd.grid")).unwrap();
    assert_eq!((grid.width, grid.height), (70, 65));
    assert!(grid.values.iter().all(|&v| v >= 0.0));
    assert_eq!(image::open(out.join("odd_density.png")).unwrap().to_luma8().dimensions(), (70, 65));
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = denet(&["gradcheck", "--seeds", "2", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("max relative error"));
    let m = manifest(dir.path());
    assert!(m["results"]["op_max_rel_err"].as_f64().unwrap() < 1e-4);
    assert!(m["results"]["e2e_max_rel_err"].as_f64().unwrap() < 1e-3);
}

#[test]
fn validation_errors_exit_one_with_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = denet(&["synth", "--out", p(&out), "--score-threshold", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("score_threshold"));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 3, "momentum": 0.9}}"#).unwrap();
    let o = denet(&["synth", "--out", p(&out), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("momentum") && err.contains("train"), "{err}");

    let o = denet(&["synth", "--out", p(&out), "--config", p(&dir.path().join("absent.json"))]);
    assert_eq!(o.status.code(), Some(1));

    let o = denet(&["synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--out"));
}

#[test]
fn io_failures_exit_two_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.ckpt");
    let img = dir.path().join("i.png");
    image::RgbImage::new(8, 8).save(&img).unwrap();
    let o = denet(&["infer", "--image", p(&img), "--checkpoint", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.ckpt"));
}

#[test]
fn pipeline_is_reproducible_from_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let run = |args: &[&str]| {
        let o = denet(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let (data, dets, tiny, run_dir, eval_dir) = (d("data"), d("dets"), d("tiny.json"), d("run"), d("eval"));
    run(&["synth", "--count", "3", "--seed", "4", "--out", p(&data)]);
    let data_before = snapshot(&data);
    run(&["mock-detect", "--dataset", p(&data), "--recall", "0.5", "--seed", "4", "--out", p(&dets)]);
    let common = ["--dataset", p(&data), "--detections", p(&dets), "--kernel", "adaptive", "--seed", "4"];
    let mut train_args = vec!["train", "--epochs", "2", "--out", p(&run_dir)];
    train_args.extend(common);
    std::fs::write(&tiny, serde_json::json!({ "model": EnetConfig::tiny() }).to_string()).unwrap();
    train_args.extend(["--config", p(&tiny)]);
    run(&train_args);
    let ckpt = run_dir.join("checkpoint.ckpt");
    let mut eval_args = vec!["eval", "--checkpoint", p(&ckpt), "--config", p(&tiny), "--out", p(&eval_dir)];
    eval_args.extend(common);
    run(&eval_args);
    assert_eq!(snapshot(&d("data")), data_before, "inputs must not change");

    for (stage, dir_name) in [("mock-detect", "dets"), ("train", "run"), ("eval", "eval")] {
        let m = manifest(&d(dir_name));
        assert_eq!(m["command"], stage);
        assert_eq!(m["seed"], 4);
        let cfg_path = d(&format!("{dir_name}.resolved.json"));
        std::fs::write(&cfg_path, m["config"].to_string()).unwrap();
        let again = d(&format!("{dir_name}.again"));
        let rerun = denet(&[stage, "--config", p(&cfg_path), "--out", p(&again)]);
        assert!(rerun.status.success(), "{stage}: {}", String::from_utf8_lossy(&rerun.stderr));
        let strip = |files: Vec<(String, Vec<u8>)>| files.into_iter().filter(|(n, _)| n != "manifest.json").collect::<Vec<_>>();
        assert_eq!(strip(snapshot(&again)), strip(snapshot(&d(dir_name))), "{stage}");
        let argv = m["argv"].as_array().unwrap();
        assert_eq!(argv[1], stage);
    }
}

#[test]
fn folds_train_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let (data, dets, tiny, cv) = (d("data"), d("dets"), d("tiny.json"), d("cv"));
    assert!(denet(&["synth", "--count", "4", "--out", p(&data)]).status.success());
    assert!(denet(&["mock-detect", "--dataset", p(&data), "--out", p(&dets)]).status.success());
    std::fs::write(&tiny, serde_json::json!({ "model": EnetConfig::tiny(), "train": { "epochs": 1 } }).to_string()).unwrap();
    let o = denet(&["eval", "--folds", "2", "--config", p(&tiny), "--dataset", p(&data), "--detections", p(&dets), "--out", p(&cv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d("cv").join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 4);
    assert!(d("cv").join("fold_0").join("checkpoint.ckpt").exists());
    assert!(d("cv").join("fold_1").join("checkpoint.ckpt").exists());
}
