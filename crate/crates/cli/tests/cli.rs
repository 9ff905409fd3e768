use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_policyflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Copy a bundled config into `dir`, pointing its output at `dir/run`.
fn local_config(name: &str, dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(repo_config(name)).unwrap()).unwrap();
    v["io"]["out_dir"] = Value::from(dir.join("run").to_str().unwrap());
    edit(&mut v);
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bundled_configs_parse() {
    for entry in fs::read_dir(repo_config("")).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        policyflow::config::RunConfig::from_json_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = local_config("two_rings.json", dir.path(), |v| v["train"]["lrr"] = Value::from(1.0));
    let out = run(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn two_ring_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = local_config("two_rings.json", dir.path(), |v| {
        v["train"]["iterations"] = Value::from(60);
        v["train"]["eval_every"] = Value::from(30);
        v["eval"]["n_samples"] = Value::from(100);
    });
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", s(&cfg)]);
    for f in ["resolved_config.json", "train_log.jsonl", "checkpoint.json"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["iteration"], 60);
    assert!(lines[1]["metrics"]["sliced_wasserstein"].as_f64().unwrap().is_finite());

    let samples = run_dir.join("samples.csv");
    let traj = run_dir.join("traj");
    ok(&["sample", "--ckpt", s(&run_dir.join("checkpoint.json")), "--n", "50", "--seed", "4", "--out", s(&samples), "--trajectories", s(&traj)]);
    let text = fs::read_to_string(&samples).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).collect();
    // conditional student: two coordinates and a label per row
    assert!(rows.iter().filter(|r| r.chars().next().unwrap().is_ascii_digit() || r.starts_with('-')).all(|r| r.split(',').count() == 3));
    assert!(traj.join("traj_00000.csv").exists());

    let reference = run_dir.join("reference.csv");
    ok(&["teacher-sample", "--config", s(&cfg), "--n", "50", "--seed", "4", "--out", s(&reference)]);
    let metrics = run_dir.join("metrics.json");
    ok(&["eval", "--samples", s(&samples), "--reference", s(&reference), "--paired", "--out", s(&metrics)]);
    let m: Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(m["endpoint_alignment_mse"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["seeds"]["samples"], 4);

    let svg = run_dir.join("plot.svg");
    ok(&["plot", "--samples", s(&samples), "--overlay", s(&reference), "--out", s(&svg)]);
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    // resuming from the final checkpoint continues the iteration count
    let cfg_more = local_config("two_rings.json", dir.path(), |v| {
        v["train"]["iterations"] = Value::from(90);
        v["train"]["eval_every"] = Value::from(30);
        v["eval"]["n_samples"] = Value::from(100);
    });
    ok(&["train", "--config", s(&cfg_more), "--resume", s(&run_dir.join("checkpoint.json"))]);
    let ck: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck["iteration"], 90);
}

#[test]
fn eval_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = local_config("ring8_gm.json", dir.path(), |_| {});
    let a = dir.path().join("a.csv");
    ok(&["teacher-sample", "--config", s(&cfg), "--substeps", "16", "--n", "64", "--seed", "2", "--out", s(&a)]);
    let out = dir.path().join("m.json");
    ok(&["eval", "--samples", s(&a), "--reference", s(&a), "--paired", "--out", s(&out)]);
    let m: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(m["endpoint_alignment_mse"].as_f64(), Some(0.0));
    assert_eq!(m["sliced_wasserstein"].as_f64(), Some(0.0));
    assert_eq!(m["version"], 1);
}

#[test]
fn toyfit_reports_small_residual() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = local_config("toyfit.json", dir.path(), |v| v["toyfit"]["iters"] = Value::from(5000));
    let out = dir.path().join("fit.json");
    ok(&["toyfit", "--config", s(&cfg), "--out", s(&out)]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(r["residual"].as_f64().unwrap() < 1e-2);
    assert_eq!(r["iterations"], 5000);
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = local_config("two_rings.json", dir.path(), |v| {
        v["train"]["iterations"] = Value::from(2);
        v["train"]["eval_every"] = Value::from(2);
        v["eval"]["n_samples"] = Value::from(8);
    });
    ok(&["train", "--config", s(&cfg)]);
    let ck_path = dir.path().join("run/checkpoint.json");
    let mut ck: Value = serde_json::from_str(&fs::read_to_string(&ck_path).unwrap()).unwrap();
    for key in ["params", "ema_params"] {
        for p in ck[key].as_array_mut().unwrap() {
            // the head sums overflow to infinity
            *p = Value::from(1e308);
        }
    }
    fs::write(&ck_path, ck.to_string()).unwrap();
    let out = run(&["sample", "--ckpt", s(&ck_path), "--n", "4", "--seed", "0", "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
