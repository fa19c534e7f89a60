use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sliceloc::evaluation::SliceErrors;
use sliceloc::shape_model::read_pdm;

const BIN: &str = env!("CARGO_BIN_EXE_sliceloc");

const SMALL: &str = r#"{
  "synth": {"n_shapes": 4, "template_subdivisions": 3, "spacing": 1.0, "padding": 4.0},
  "train": {"epochs": 1},
  "triplets": {"anchors_per_shape": 10},
  "evaluation": {"n_slices": 6, "folds": 2}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Temp dir holding `small.json` and a synthesized family under `data/`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    ok(dir.path(), &["synth", "--config", "small.json", "--out", "data"]);
    dir
}

#[test]
fn help_documents_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&str, &[&str])] = &[
        ("synth", &["--n-shapes", "--no-volumes"]),
        ("voxelize", &["--mesh", "--spacing", "--padding"]),
        ("build-pdm", &["--shapes"]),
        ("sample-shape", &["--pdm", "--template", "--std", "--scaling"]),
        ("sample-triplets", &["--data", "--shape", "--count"]),
        ("train", &["--data", "--shapes"]),
        ("gradcheck", &["--dims", "--step"]),
        ("localize", &["--data", "--shape", "--z", "--oracle", "--noise", "--encoders"]),
        ("evaluate", &["--data", "--shape", "--prediction", "--z", "--slices", "--reference-length", "--oracle"]),
        ("folds", &["--data", "--task", "--oracle", "--noise", "--baseline"]),
    ];
    for (cmd, flags) in cases {
        let out = run(dir.path(), &[cmd, "--help"]);
        assert!(out.status.success(), "{cmd} --help");
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in flags.iter().chain(&["--config", "--seed", "--out", "--threads"]) {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
    assert!(run(dir.path(), &["--help"]).status.success());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(run(p, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(p, &["localize", "--bogus"]).status.code(), Some(1));
    fs::write(p.join("bad.json"), r#"{"seed": 1, "unknown": 2}"#).unwrap();
    let out = run(p, &["gradcheck", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown"));
    assert_eq!(run(p, &["voxelize", "--mesh", "missing.obj"]).status.code(), Some(1));
    assert_eq!(run(p, &["evaluate", "--data", "nowhere", "--shape", "0", "--oracle"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck", "--seed", "7", "--out", "gc"]);
    let line = stdout.lines().last().unwrap();
    let value: f64 = line.trim_start_matches("max relative error ").parse().unwrap();
    assert!(value < 1e-4, "{stdout}");
    assert!(dir.path().join("gc/gradcheck.json").exists());
}

#[test]
fn two_shape_pdm_has_one_mode() {
    let ws = workspace();
    let p = ws.path();
    fs::create_dir(p.join("two")).unwrap();
    for f in ["shape_000.obj", "shape_001.obj"] {
        fs::copy(p.join("data").join(f), p.join("two").join(f)).unwrap();
    }
    ok(p, &["build-pdm", "--shapes", "two", "--out", "pdm"]);
    let pdm = read_pdm::<f64>(&p.join("pdm/pdm")).unwrap();
    assert_eq!(pdm.modes(), 1);
    ok(p, &["sample-shape", "--pdm", "pdm/pdm", "--template", "two/shape_000.obj", "--out", "s"]);
    assert!(p.join("s/sample.obj").exists());
}

#[test]
fn oracle_localization_within_spacing() {
    let ws = workspace();
    let p = ws.path();
    for z in ["-6.0", "0.0", "7.5"] {
        ok(p, &["localize", "--config", "small.json", "--data", "data", "--shape", "1", "--z", z, "--oracle", "--noise", "0", "--out", "loc"]);
        ok(p, &["evaluate", "--config", "small.json", "--data", "data", "--shape", "1", "--prediction", "loc/prediction.json", "--z", z, "--out", "ev"]);
        let e: SliceErrors = serde_json::from_str(&fs::read_to_string(p.join("ev/errors.json")).unwrap()).unwrap();
        assert!(e.translational_mm <= 1.0, "z = {z}: {e:?}");
    }
}

#[test]
fn runs_are_byte_identical() {
    let ws = workspace();
    let p = ws.path();
    ok(p, &["synth", "--config", "small.json", "--out", "again"]);
    for f in ["family.json", "shape_002.obj", "us_002.raw", "sdf_003.raw"] {
        assert_eq!(fs::read(p.join("data").join(f)).unwrap(), fs::read(p.join("again").join(f)).unwrap(), "{f}");
    }
    for out in ["a", "b"] {
        ok(p, &["evaluate", "--config", "small.json", "--data", "data", "--shape", "0", "--oracle", "--noise", "1", "--out", out]);
    }
    assert_eq!(fs::read(p.join("a/report.json")).unwrap(), fs::read(p.join("b/report.json")).unwrap());
    assert_eq!(fs::read(p.join("a/slices.csv")).unwrap(), fs::read(p.join("b/slices.csv")).unwrap());
    let csv = fs::read_to_string(p.join("a/slices.csv")).unwrap();
    assert!(csv.starts_with("slice_index,z_mm,trans_mm,rot_deg,loss,fallback\n"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn seed_override_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("small.json"), SMALL).unwrap();
    ok(p, &["synth", "--config", "small.json", "--no-volumes", "--out", "a"]);
    ok(p, &["synth", "--config", "small.json", "--no-volumes", "--seed", "5", "--out", "b"]);
    assert_ne!(fs::read(p.join("a/shape_000.obj")).unwrap(), fs::read(p.join("b/shape_000.obj")).unwrap());
}

#[test]
fn train_then_learned_sweep_and_folds() {
    let ws = workspace();
    let p = ws.path();
    ok(p, &["sample-triplets", "--config", "small.json", "--data", "data", "--shape", "0", "--count", "4", "--out", "t"]);
    assert_eq!(fs::read_to_string(p.join("t/triplets.jsonl")).unwrap().lines().count(), 4);
    ok(p, &["train", "--config", "small.json", "--data", "data", "--shapes", "0,1", "--out", "tr"]);
    assert!(p.join("tr/encoder_us.enc.json").exists() && p.join("tr/encoder_sdf.enc.raw").exists());
    let stdout = ok(p, &["evaluate", "--config", "small.json", "--data", "data", "--shape", "2", "--encoders", "tr/encoder", "--out", "ev"]);
    assert!(stdout.contains("10% thresh."));
    let stdout = ok(p, &["folds", "--config", "small.json", "--data", "data", "--oracle", "--baseline", "--threads", "1", "--out", "f"]);
    assert!(stdout.contains("random baseline"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("f/folds.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 2);
}
