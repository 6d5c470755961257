use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kcd_core::consistency::{ConsistencyMatrix, ConsistencyMetric, MetricKind};
use kcd_core::lab::RunConfig;
use kcd_core::{sha256_hex, Matrix};
use serde_json::Value;

fn kcd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kcd")).current_dir(dir).args(args).output().expect("spawn kcd")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = kcd(dir, args);
    assert!(out.status.success(), "kcd {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_config(dir: &Path) {
    let mut cfg = RunConfig::reference(7);
    cfg.dataset.n = 800;
    cfg.teacher.train.epochs = 10;
    cfg.train.epochs = 6;
    fs::write(dir.join("run.toml"), cfg.to_toml()).unwrap();
}

#[test]
fn bipartite_on_swap_matrix_gives_swap_map() {
    let dir = tempfile::tempdir().unwrap();
    let m = ConsistencyMatrix {
        m: Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
        metric: ConsistencyMetric::new(MetricKind::Correlation, 1e-8).unwrap(),
        sample_count: 4,
    };
    m.save(&dir.path().join("M.npy")).unwrap();
    ok(dir.path(), &["match", "--matrix", "M.npy", "--strategy", "bipartite", "--out", "t.map"]);
    let rec = json(&dir.path().join("t.map"));
    assert_eq!(rec["kind"], "permutation");
    assert_eq!(rec["map"], serde_json::json!([1, 0]));
    let prov = json(&dir.path().join("t.map.prov.json"));
    assert_eq!(prov["result"]["gamma_transformed"], 2.0);
    assert_eq!(prov["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn distill_run_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    ok(dir.path(), &["--threads", "1", "distill", "run", "--config", "run.toml", "--out", "a"]);
    ok(dir.path(), &["--threads", "4", "distill", "run", "--config", "run.toml", "--out", "b"]);
    for f in ["report.json", "curves.csv", "run.toml", "provenance.json", "transform/transform.json", "activations/distilled_test.npy"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(sha256_hex(&a), sha256_hex(&b), "{f} differs");
    }
}

#[test]
fn synth_then_distill_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let cfg = RunConfig::from_toml(&fs::read_to_string(dir.path().join("run.toml")).unwrap()).unwrap();
    fs::write(dir.path().join("spec.toml"), toml::to_string(&cfg.dataset).unwrap()).unwrap();
    ok(dir.path(), &["synth", "--spec", "spec.toml", "--out", "data"]);
    for f in ["inputs.npy", "labels.npy", "train_idx.npy", "test_idx.npy", "student_train_idx.npy", "provenance.json"] {
        assert!(dir.path().join("data").join(f).exists(), "{f}");
    }
    ok(dir.path(), &["distill", "run", "--config", "run.toml", "--out", "rep"]);
    let report = json(&dir.path().join("rep/report.json"));
    let gi = report["gamma"]["identity"].as_f64().unwrap();
    let gt = report["gamma"]["transformed"].as_f64().unwrap();
    assert!(gt >= gi, "{gt} < {gi}");
    assert_eq!(report["init_mismatch"], false);

    // the exported features go straight back into the analysis stages
    let r = dir.path().join("rep");
    ok(&r, &["consistency", "--teacher", "activations/teacher_test.npy", "--student", "activations/baseline_test.npy", "--out", "M.npy"]);
    ok(&r, &["match", "--matrix", "M.npy", "--out", "t.map"]);
    ok(&r, &["overlap", "--teacher", "activations/teacher_test.npy", "--student", "activations/baseline_test.npy",
        "--labels", "activations/labels_test.npy", "--k", "2,4", "--transform", "t.map", "--out", "ov"]);
    ok(&r, &["distance", "--teacher", "activations/teacher_test.npy", "--student", "activations/baseline_test.npy", "--out", "d.json"]);
    assert_eq!(json(&r.join("ov/overlap.json"))["k_values"], serde_json::json!([2, 4]));
}

#[test]
fn mismatched_init_flag_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    ok(dir.path(), &["distill", "run", "--config", "run.toml", "--reinit-seed", "99", "--out", "abl"]);
    let report = json(&dir.path().join("abl/report.json"));
    assert_eq!(report["init_mismatch"], true);
    assert_eq!(report["student_distill_seed"], 99);
    let resolved = fs::read_to_string(dir.path().join("abl/run.toml")).unwrap();
    assert!(resolved.contains("reinit_seed = 99"));
}

#[test]
fn learned_transforms_and_apply() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let t = Matrix::from_fn(40, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0 + 0.1 * j as f64);
    let s = Matrix::from_fn(40, 3, |i, j| t[(i, [2, 0, 1][j])]);
    kcd_core::activations::write_matrix_npy(&t, &p.join("t.npy")).unwrap();
    kcd_core::activations::write_matrix_npy(&s, &p.join("s.npy")).unwrap();
    ok(p, &["learn-transform", "--kind", "fc", "--lambda", "0", "--teacher", "t.npy", "--student", "s.npy", "--out", "fc.map"]);
    ok(p, &["apply", "--transform", "fc.map", "--input", "t.npy", "--out", "moved.npy"]);
    let moved = kcd_core::read_npy(&p.join("moved.npy")).unwrap();
    for (a, b) in moved.data().iter().zip(s.as_slice()) {
        assert!((a - b).abs() < 1e-8);
    }
    ok(p, &["--seed", "3", "learn-transform", "--kind", "res", "--epochs", "20", "--teacher", "t.npy", "--student", "s.npy", "--out", "res.map"]);
    for f in ["res.map.w1.npy", "res.map.b1.npy", "res.map.w2.npy", "res.map.b2.npy", "res.loss.csv"] {
        assert!(p.join(f).exists(), "{f}");
    }
    let prov = json(&p.join("res.map.prov.json"));
    assert!(prov["result"]["final_mse"].as_f64().unwrap() <= prov["result"]["initial_mse"].as_f64().unwrap());
}

#[test]
fn errors_are_single_line_with_category() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = kcd(p, &["match", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: ConfigError:"));

    fs::write(p.join("bad.npy"), b"\x93NUMPY\x01\x00garbage").unwrap();
    let out = kcd(p, &["pool", "--input", "bad.npy", "--out", "x.npy"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: FormatError:"));

    let out = kcd(p, &["synth", "--spec", "missing.toml", "--out", "d"]);
    assert_eq!(out.status.code(), Some(3));

    fs::write(p.join("run.toml"), "nonsense = 1\n").unwrap();
    let out = kcd(p, &["distill", "run", "--config", "run.toml", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: ConfigError:"));
}

#[test]
fn pool_averages_spatial_positions() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|v| v as f64).collect();
    kcd_core::npy::write_float(&p.join("x.npy"), &[2, 3, 2, 2], kcd_core::npy::Dtype::F32, &data).unwrap();
    ok(p, &["pool", "--input", "x.npy", "x.npy", "--out", "pooled.npy"]);
    let t = kcd_core::read_npy(&p.join("pooled.npy")).unwrap();
    assert_eq!(t.shape(), [4, 3, 1, 1]);
    assert_eq!(t.dtype(), kcd_core::npy::Dtype::F32);
    assert_eq!(&t.data()[..3], &[1.5, 5.5, 9.5]);
}

#[test]
fn template_is_a_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "4", "distill", "template", "--out", "run.toml"]);
    let cfg = RunConfig::from_toml(&fs::read_to_string(dir.path().join("run.toml")).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::reference(4));
}
