use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 8] = ["gen-data", "preprocess", "inflate", "train", "infer", "eval", "audit", "ablate"];

const TINY: &str = r#"{
  "data": {"n_train": 2, "n_heldout": 1, "dims": [16, 16, 16]},
  "encoder": {"grid": [4, 4, 4], "window": [2, 2, 2]},
  "train": {"epochs": 1},
  "eval": {"prompt_trials": 2, "ablation_seeds": [0]}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vol-adapter"));
    c.env("VOLADAPTER_THREADS", "1");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn help_on_every_subcommand() {
    for sc in SUBCOMMANDS {
        let out = bin().args([sc, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{sc}");
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in ["--config", "--seed", "--out"] {
            assert!(text.contains(flag), "{sc} help lacks {flag}");
        }
    }
}

#[test]
fn invalid_config_names_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"train":{"lr":-1}}"#).unwrap();
    let out = bin().current_dir(dir.path()).args(["--config", "bad.json", "audit"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));
}

#[test]
fn unknown_arm_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().current_dir(dir.path()).args(["ablate", "--arm", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().current_dir(dir.path()).args(["train", "--data", "nowhere"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn audit_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["audit", "--full-scale"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("added fraction"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/audit.json")).unwrap()).unwrap();
    let f = v["added_fraction"].as_f64().unwrap();
    assert!((0.065..=0.095).contains(&f));
}

fn pipeline(dir: &Path, seed: &str) {
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    let c = ["--config", "tiny.json", "--seed", seed];
    run(dir, &[&c[..], &["gen-data"]].concat());
    run(dir, &[&c[..], &["preprocess"]].concat());
    run(dir, &[&c[..], &["train"]].concat());
    run(dir, &[&c[..], &["eval", "--model", "out/model"]].concat());
    std::fs::write(dir.join("p.json"), r#"{"points":[[8,8,8]]}"#).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("out/data/manifest.json")).unwrap()).unwrap();
    let input = format!("out/data/heldout/{}", manifest["heldout"][0].as_str().unwrap());
    run(
        dir,
        &[&c[..], &["infer", "--model", "out/model", "--input", &input, "--stats", "out/stats.json", "--prompt", "p.json"]].concat(),
    );
}

#[test]
fn pipeline_is_deterministic_and_stamped() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "7");
    pipeline(b.path(), "7");
    for f in [
        "out/model.ckpt.json",
        "out/model.ckpt.bin",
        "out/report.json",
        "out/train.log.jsonl",
        "out/stats.json",
        "out/prediction.msk.raw",
        "out/prediction.json",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
    for f in ["out/model.ckpt.json", "out/report.json", "out/stats.json", "out/prediction.json", "out/data/manifest.json"] {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join(f)).unwrap()).unwrap();
        let meta = v.get("meta").unwrap_or(&v);
        assert!(meta.get("fingerprint").is_some(), "{f} lacks fingerprint");
        assert_eq!(meta["seed"], 7, "{f} lacks seed");
    }
    let log = std::fs::read_to_string(a.path().join("out/train.log.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(line["seed"], 7);
}
