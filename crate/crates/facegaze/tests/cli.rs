use std::path::Path;
use std::process::{Command, Output};

use facegaze::pipeline::run_pipeline;
use facegaze::suite::Suite;
use facegaze::PipelineConfig;

const SMALL: &[&str] = &[
    "--set",
    "scenario.model_vertices=400",
    "--set",
    "scenario.model_modes=4",
    "--set",
    "scenario.frames=24",
    "--set",
    "scenario.scan_size=1500",
    "--set",
    "regress.grid=4",
    "--set",
    "fit.source_samples=400",
];

fn facegaze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facegaze")).args(args).output().unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn stderr_kind(o: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).expect("stderr is JSON");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn small_config() -> PipelineConfig {
    let sets: Vec<String> = SMALL.iter().filter(|s| **s != "--set").map(|s| s.to_string()).collect();
    PipelineConfig::default().apply_overrides(&sets).unwrap()
}

fn gen(dir: &Path, seed: &str) -> Output {
    facegaze(&with_small(&["gen", "--quiet", "--seed", seed, "--out", dir.to_str().unwrap()]))
}

#[test]
fn gen_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(gen(a.path(), "5").status.success());
    assert!(gen(b.path(), "5").status.success());
    let ma = std::fs::read(a.path().join("manifest.json")).unwrap();
    let mb = std::fs::read(b.path().join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
    let c = tempfile::tempdir().unwrap();
    assert!(gen(c.path(), "6").status.success());
    assert_ne!(ma, std::fs::read(c.path().join("manifest.json")).unwrap());
}

#[test]
fn invalid_config_is_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("suite");
    let o = facegaze(&with_small(&["gen", "--out", out.to_str().unwrap(), "--set", "scenario.outlier_fraction=1.0"]));
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_kind(&o), "validation");
    assert!(!out.exists());
}

#[test]
fn empty_suite_is_a_validation_error() {
    let o = facegaze(&["pipeline", "--set", "scenario.frames=0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_key_and_bad_flag_exit_with_one() {
    assert_eq!(facegaze(&["pipeline", "--set", "fit.nope=1"]).status.code(), Some(1));
    assert_eq!(facegaze(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_with_two() {
    let o = facegaze(&["fit", "--scan", "/nonexistent/a.ply", "--model", "/nonexistent/m.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_kind(&o), "io");
}

#[test]
fn help_and_version_succeed() {
    assert!(facegaze(&["--help"]).status.success());
    assert!(facegaze(&["--version"]).status.success());
}

#[test]
fn fit_normalize_features_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(gen(d, "3").status.success());
    let s = |p: &str| d.join(p).to_str().unwrap().to_string();
    let (scan, model, manifest) = (s("static/0000_scan.ply"), s("model.json"), s("manifest.json"));
    let fit_out = d.join("fitrun");
    let o = facegaze(&with_small(&[
        "fit",
        "--quiet",
        "--scan",
        &scan,
        "--model",
        &model,
        "--manifest",
        &manifest,
        "--frame",
        "0",
        "--out",
        fit_out.to_str().unwrap(),
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fit: serde_json::Value = serde_json::from_slice(&std::fs::read(fit_out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["converged"], true);

    let o = facegaze(&with_small(&[
        "fit",
        "--scan",
        &scan,
        "--model",
        &model,
        "--manifest",
        &manifest,
        "--frame",
        "0",
        "--set",
        "fit.max_iters=1",
    ]));
    assert!(o.status.success());
    let one: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(one["converged"], false);

    let fit_path = fit_out.join("fit.json");
    let norm = d.join("norm");
    let o = facegaze(&with_small(&[
        "normalize",
        "--quiet",
        "--model",
        &model,
        "--fit",
        fit_path.to_str().unwrap(),
        "--image",
        &s("static/0000_sensed.pgm"),
        "--out",
        norm.to_str().unwrap(),
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(norm.join("canonical.ply").is_file());
    assert!(norm.join("canonical.pgm").is_file());

    let o = facegaze(&with_small(&[
        "features",
        "--model",
        &model,
        "--fit",
        fit_path.to_str().unwrap(),
        "--image",
        &s("static/0000_sensed.pgm"),
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(f["left"].as_array().unwrap().len(), 15);
    assert_eq!(f["right"].as_array().unwrap().len(), 15);
}

#[test]
fn pipeline_train_predict_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = facegaze(&with_small(&["pipeline", "--quiet", "--out", d.to_str().unwrap()]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "facegaze.report/1");
    assert_eq!(report["config"]["scenario"]["frames"], 24);
    let samples = d.join("samples_static_left.json");
    assert!(samples.is_file());

    let o = facegaze(&with_small(&["train", "--samples", samples.to_str().unwrap()]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let train = d.join("train.json");
    std::fs::write(&train, &o.stdout).unwrap();
    let o =
        facegaze(&with_small(&["predict", "--train", train.to_str().unwrap(), "--queries", samples.to_str().unwrap()]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let preds = d.join("preds.json");
    std::fs::write(&preds, &o.stdout).unwrap();
    let o = facegaze(&["eval", "--predictions", preds.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(e["knn"]["count"].as_u64().unwrap() > 0);
    assert!(e["alr"]["mean"].as_f64().unwrap().is_finite());
}

#[test]
fn suite_on_disk_matches_in_memory_suite() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen(dir.path(), "11").status.success());
    let mut config = small_config();
    config.seed = 11;
    let from_disk = run_pipeline(&config, &Suite::open(dir.path()).unwrap()).unwrap();
    let in_memory = run_pipeline(&config, &Suite::synthetic(&config).unwrap()).unwrap();
    assert_eq!(from_disk.sections, in_memory.sections);
}
