use std::path::Path;
use std::process::{Command, Output};

use fsqs::cli::{RunManifest, EXIT_RUNTIME, EXIT_USAGE};
use fsqs::eval::EvalReport;

fn fsqs(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsqs"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("FSQS_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) {
    let out = fsqs(cwd, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const QUICK: &[&str] = &["--steps", "20", "--val-every", "10", "--val-episodes", "5"];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(cwd: &Path, args: &[String]) {
    ok(cwd, &args.iter().map(String::as_str).collect::<Vec<_>>());
}

#[test]
fn gen_data_is_reproducible_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--seed", "7", "--out", "a"]);
    ok(d, &["gen-data", "--seed", "7", "--out", "b"]);
    for f in ["manifest.json", "features.bin", "index.json", "split.json"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    // 20 classes x 8 domains x 64 items of 8 f32 features
    assert_eq!(std::fs::metadata(d.join("a/features.bin")).unwrap().len(), 20 * 8 * 64 * 8 * 4);
    let manifest = RunManifest::load(&d.join("a")).unwrap();
    assert_eq!(manifest.command, "gen-data");
    assert_eq!(manifest.seeds, vec![7, 7]);
    assert!(manifest.artifacts.contains(&"split.json".to_string()));

    let again = fsqs(d, &["gen-data", "--seed", "7", "--out", "a"]);
    assert_eq!(again.status.code(), Some(EXIT_RUNTIME));
    assert!(stderr(&again).contains("--force"));
    ok(d, &["gen-data", "--seed", "8", "--out", "a", "--force"]);
    assert_ne!(std::fs::read(d.join("a/features.bin")).unwrap(), std::fs::read(d.join("b/features.bin")).unwrap());
}

#[test]
fn default_output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fsqs"))
        .args(["gen-data", "--items", "8"])
        .current_dir(dir.path())
        .env("FSQS_OUTPUT_ROOT", dir.path().join("root"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("root/gen-data/run.json").exists());
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(fsqs(d, &["train", "--data", "x", "--bogus"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(fsqs(d, &["train", "--data", "x", "--ot", "sometimes"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(fsqs(d, &["eval", "--data", "x"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(fsqs(d, &["train", "--data", "x", "--learner", "tp", "--ot", "never"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(fsqs(d, &["--help"]).status.code(), Some(0));

    let missing = fsqs(d, &["train", "--data", "nowhere", "--out", "t"]);
    assert_eq!(missing.status.code(), Some(EXIT_RUNTIME));
    assert!(stderr(&missing).contains("nowhere"));
    assert!(!d.join("t").exists());
}

#[test]
fn too_few_classes_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--classes", "6", "--items", "8", "--out", "small"]);
    let out = fsqs(d, &["train", "--data", "small", "--n-way", "5", "--out", "t"]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    assert!(stderr(&out).contains("split part `train` has 3 classes, episode needs 5"), "{}", stderr(&out));

    let split = fsqs(d, &["gen-data", "--classes", "2", "--out", "tiny"]);
    assert_eq!(split.status.code(), Some(EXIT_RUNTIME));
    assert!(stderr(&split).contains("would be empty"));
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--items", "24", "--out", "data"]);
    run(d, &with(&["train", "--data", "data", "--regime", "erm", "--out", "erm"], QUICK));
    run(d, &with(&["train", "--data", "data", "--regime", "episodic", "--learner", "tp", "--bn", "tbn", "--out", "tp"], QUICK));
    let erm = std::fs::read(d.join("erm/checkpoint.json")).unwrap();
    let tp = std::fs::read(d.join("tp/checkpoint.json")).unwrap();
    assert_ne!(erm, tp);
    let log = std::fs::read_to_string(d.join("tp/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);

    let manifest = RunManifest::load(&d.join("tp/run.json")).unwrap();
    assert_eq!(manifest.config["train"]["bn"], "transductive");
    assert_eq!(manifest.config["train"]["learner"]["ot"], "train_and_test");

    ok(d, &["eval", "--data", "data", "--checkpoint", "tp", "--learner", "tp", "--bn", "tbn", "--no-shift", "--episodes", "20", "--seeds", "1,2,3", "--out", "ev"]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert!(!report.setting.shifted);
    assert_eq!(report.seeds, vec![1, 2, 3]);
    assert_eq!(report.episode_accuracies.len(), 3);
    assert_eq!(report.learner, "tp");
    let csv = std::fs::read_to_string(d.join("ev/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("tp,protonet,episodic,tbn,ot,false,5,1,8,20,1;2;3,"));

    // checkpoint from a wider dataset is refused up front
    ok(d, &["gen-data", "--items", "8", "--dim", "6", "--out", "narrow"]);
    let out = fsqs(d, &["eval", "--data", "narrow", "--checkpoint", "tp/checkpoint.json", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    assert!(stderr(&out).contains("checkpoint input width"));
}

#[test]
fn replay_reproduces_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--items", "16", "--out", "data"]);
    run(
        d,
        &with(&["ablate", "--data", "data", "--heads", "protonet", "--episodes", "10", "--seeds", "3", "--out", "abl"], QUICK),
    );
    let csv = std::fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
    assert_eq!(std::fs::read_dir(d.join("abl/checkpoints")).unwrap().count(), 5);

    ok(d, &["replay", "abl/run.json", "--out", "again"]);
    for f in ["ablation.csv", "reports.json"] {
        assert_eq!(std::fs::read(d.join("abl").join(f)).unwrap(), std::fs::read(d.join("again").join(f)).unwrap());
    }
    let a = RunManifest::load(&d.join("abl")).unwrap();
    let b = RunManifest::load(&d.join("again")).unwrap();
    assert_eq!(a.config, b.config);
    assert_eq!(a.artifacts, b.artifacts);

    let refused = fsqs(d, &["replay", "abl", "--out", "again"]);
    assert_eq!(refused.status.code(), Some(EXIT_RUNTIME));
    assert_eq!(fsqs(d, &["replay", "abl"]).status.code(), Some(EXIT_USAGE));
}
