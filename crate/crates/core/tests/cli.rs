mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{read, write_tiny};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclebalance"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_override_value_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_tiny(d.path());
    let o = cli(&["run", "--config", path(&cfg), "--set", "gan.lambda_cyc=abc"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gan.lambda_cyc"), "{err}");
    // nothing ran
    assert!(!d.path().join("stages").exists());
}

#[test]
fn unknown_subcommand_and_missing_config_are_usage_errors() {
    assert_eq!(code(&cli(&["frobnicate"])), 1);
    assert_eq!(code(&cli(&["run"])), 1);
    let o = cli(&["run", "--config", "/no/such/file.toml"]);
    assert_ne!(code(&o), 0);
    assert_eq!(code(&cli(&["--help"])), 0);
}

#[test]
fn run_then_report_and_eval() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_tiny(d.path());
    let out = d.path().join("exp");
    let o = cli(&[
        "--quiet",
        "run",
        "--config",
        path(&cfg),
        "--set",
        &format!("output_dir={:?}", path(&out)),
        "--set",
        "regimes=[\"baseline\",\"aug_same_data\"]",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stderr.is_empty(), "--quiet still wrote progress");
    assert!(out.join("summary.json").is_file());

    let o = cli(&["report", "--dir", path(&out)]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("status: complete") && text.contains("aug_same_data"), "{text}");

    let ckpt = |regime: &str| {
        std::fs::read_dir(out.join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.file_name().unwrap().to_string_lossy().starts_with(&format!("classifier_{regime}-")))
            .unwrap()
    };
    let eval_dir = d.path().join("eval");
    let o = cli(&[
        "eval",
        "--manifest",
        path(&out.join("manifests/primary.csv")),
        "--checkpoint",
        &format!("baseline={}", path(&ckpt("baseline"))),
        "--checkpoint",
        &format!("aug_same_data={}", path(&ckpt("aug_same_data"))),
        "--out",
        path(&eval_dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["plots/curves.svg", "plots/curves.png", "metrics/metrics.csv", "metrics/roc_baseline.csv"] {
        assert!(eval_dir.join(f).is_file(), "missing {f}");
    }
    // standalone evaluation agrees with the pipeline's own scoring
    assert_eq!(
        read(&eval_dir.join("metrics/metrics.csv")),
        read(&out.join("metrics/metrics.csv"))
    );
}

#[test]
fn report_on_missing_directory_fails() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&cli(&["report", "--dir", path(&d.path().join("none"))])), 2);
}

#[test]
fn synth_writes_a_manifest_and_prints_balance() {
    let d = tempfile::tempdir().unwrap();
    let o = cli(&[
        "synth",
        "--out",
        path(d.path()),
        "--seed",
        "3",
        "--set",
        "size=16",
        "--set",
        "train={ class0 = 9, class1 = 1 }",
        "--set",
        "validation={ class0 = 2, class1 = 2 }",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = read(&d.path().join("manifest.csv"));
    assert_eq!(m.lines().count(), 1 + 14);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["splits"]["train"]["ratio"], 9.0);
    assert_eq!(report["splits"]["validation"]["class1"], 2);
}
