use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[grid]
L = 50.26548245743669
N = 256

[model]
variant = "signed"
alpha = 1.0

[initial.1]
kind = "ground_state"

[run]
name = "tiny"
t_end = 0.5
observe_every = 0.25
snapshot_times = [0.5]
"#;

fn gkdv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gkdv")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

#[test]
fn list_presets_names_the_breather_run() {
    let o = gkdv(&["list-presets"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("two-gauss-breather")), "{text}");
    assert!(text.contains("schamel-gauss-pos"));
}

#[test]
fn preset_run_creates_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = gkdv(&["preset", "--name", "soliton-travel", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "manifest.json",
        "diagnostics.ndjson",
        "diagnostics_v.ndjson",
        "difference.ndjson",
        "summary.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let snapshots = fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("snapshot_t")
        })
        .count();
    assert!(snapshots >= 2);
}

#[test]
fn run_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let o = gkdv(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "run.t_end=0.25",
        "--set",
        "run.snapshot_times=[0.25]",
        "--set",
        "integrator.dt=0.0125",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["run"]["t_end"], 0.25);
    assert_eq!(manifest["spec"]["integrator"]["dt"], 0.0125);
    assert_eq!(
        fs::read_to_string(out.join("diagnostics.ndjson"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let again = dir.path().join("again");
    let manifest_path = out.join("manifest.json");
    let o = gkdv(&[
        "run",
        "--config",
        manifest_path.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("diagnostics.ndjson")).unwrap(),
        fs::read(again.join("diagnostics.ndjson")).unwrap()
    );
}

#[test]
fn invalid_override_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let o = gkdv(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "grid.N=255",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("N must be even"), "{}", stderr(&o));
    assert!(stderr(&o).contains("[integrator]"));
    assert!(!out.join("diagnostics.ndjson").exists());

    let o = gkdv(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "grid.M=3",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_preset_lists_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let o = gkdv(&["preset", "--name", "nope", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("two-gauss-breather"));
}

#[test]
fn integrator_failure_exits_two_with_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let o = gkdv(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "initial.1.scale=40",
        "--set",
        "integrator.scheme=midpoint",
        "--set",
        "integrator.dt=0.25",
        "--set",
        "integrator.fp_max_iters=3",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}{}", stdout(&o), stderr(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["completed"], false);
    assert!(summary["failure"]["t"].is_number());
}

#[test]
fn convergence_reports_fourth_order_for_etdrk4() {
    let dir = tempfile::tempdir().unwrap();
    let o = gkdv(&[
        "convergence",
        "--scheme",
        "etdrk4",
        "--alpha",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let study: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("convergence.json")).unwrap()).unwrap();
    let slope = study["slope"].as_f64().unwrap();
    assert!((3.7..=4.3).contains(&slope), "slope {slope}");
    assert!(stdout(&o).contains(&format!("{slope:.3}")), "{}", stdout(&o));
}
