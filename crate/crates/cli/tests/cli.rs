use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rvsb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rvsb"))
        .args(args)
        .env("RVSB_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rvsb(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path
}

const SMALL: &str = r#"{
  "dataset": {"n_pairs": 8},
  "train": {"epochs": 2},
  "sweep": {"sir_values": [0.0, -9.0], "sigma_values": [0.0, 0.3]}
}"#;

/// Synthesizes an 8-pair desk dataset and trains it for two epochs.
fn trained(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = write_config(dir, "small.json", SMALL);
    let data = dir.join("data");
    let run = dir.join("run");
    ok(&["synth-data", "--profile", "desk", "--config", p(&cfg), "--out", p(&data), "--seed", "3"]);
    ok(&["train", "--profile", "desk", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--seed", "3"]);
    (cfg, data, run)
}

#[test]
fn simulate_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--out", p(&a), "--seed", "1"]);
    ok(&["simulate", "--out", p(&b), "--seed", "1"]);
    let text = fs::read_to_string(a.join("interference.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,I,Q"));
    assert_eq!(lines.count(), 1100);
    assert_eq!(text, fs::read_to_string(b.join("interference.csv")).unwrap());
    let c = tmp.path().join("c");
    ok(&["simulate", "--out", p(&c), "--seed", "2"]);
    assert_ne!(text, fs::read_to_string(c.join("interference.csv")).unwrap());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let no_limbs = write_config(tmp.path(), "nolimbs.json", r#"{"gait": {"limbs": []}}"#);
    let out = rvsb(&["simulate", "--config", p(&no_limbs), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let unknown = write_config(tmp.path(), "unknown.json", r#"{"train": {"epoch": 3}}"#);
    let out = rvsb(&["simulate", "--config", p(&unknown), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
    let out = rvsb(&["train", "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rvsb(&["train", "--data", p(&tmp.path().join("missing")), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn synth_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth-data", "--profile", "desk", "--config", p(&cfg), "--out", p(d), "--seed", "5"]);
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 8);
    assert_eq!(manifest["sir_range"], serde_json::json!([-9.0, 0.0]));
    for f in ["manifest.json", "mixtures.f32", "cleans.f32", "vitals.f32", "interference.f32"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_zero_epochs_and_metrics_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let zero = write_config(tmp.path(), "z.json", r#"{"dataset": {"n_pairs": 8}, "train": {"epochs": 0}}"#);
    let data = tmp.path().join("data");
    ok(&["synth-data", "--profile", "desk", "--config", p(&cfg), "--out", p(&data)]);
    let init = tmp.path().join("init");
    ok(&["train", "--profile", "desk", "--config", p(&zero), "--data", p(&data), "--out", p(&init)]);
    let metrics = fs::read_to_string(init.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    let ckpt: serde_json::Value = serde_json::from_str(&fs::read_to_string(init.join("best/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["epoch"], 0);

    let run = tmp.path().join("run");
    ok(&["train", "--profile", "desk", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,train_recon,train_kld,val_total,lr"));
    assert_eq!(metrics.lines().count(), 3);
    assert!(run.join("best/checkpoint.json").exists() && run.join("best/weights.f32").exists());
    assert!(run.join("last/checkpoint.json").exists());
}

#[test]
fn divergence_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let data = tmp.path().join("data");
    ok(&["synth-data", "--profile", "desk", "--config", p(&cfg), "--out", p(&data)]);
    let wild = write_config(tmp.path(), "w.json", r#"{"train": {"epochs": 3, "optimizer": {"lr": 1e300}}}"#);
    let out = rvsb(&["train", "--profile", "desk", "--config", p(&wild), "--data", p(&data), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn infer_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data, run) = trained(tmp.path());
    let best = run.join("best");
    let (a, b) = (tmp.path().join("ia"), tmp.path().join("ib"));
    ok(&["infer", "--config", p(&cfg), "--checkpoint", p(&best), "--data", p(&data), "--index", "7", "--out", p(&a), "--triptych"]);
    ok(&["infer", "--config", p(&cfg), "--checkpoint", p(&best), "--data", p(&data), "--index", "7", "--out", p(&b)]);
    let est = fs::read(a.join("estimate.f32")).unwrap();
    assert_eq!(est.len(), 2 * 32 * 32 * 4);
    assert_eq!(est, fs::read(b.join("estimate.f32")).unwrap());
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("estimate.json")).unwrap()).unwrap();
    assert_eq!(rec["shape"], serde_json::json!([2, 32, 32]));
    assert!(a.join("triptych.png").exists());
    assert!(!b.join("triptych.png").exists());
    let out = rvsb(&["infer", "--checkpoint", p(&best), "--data", p(&data), "--index", "99", "--out", p(&a)]);
    assert_eq!(out.status.code(), Some(2));

    let s1 = tmp.path().join("s1");
    ok(&["sweep", "--config", p(&cfg), "--checkpoint", p(&best), "--data", p(&data), "--metric", "recon", "--out", p(&s1)]);
    assert!(s1.join("recon_loss.csv").exists() && s1.join("recon_loss.png").exists());
    let grids: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(s1.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(grids.len(), 1);

    let s3 = tmp.path().join("s3");
    let args = ["sweep", "--config", p(&cfg), "--checkpoint", p(&best), "--data", p(&data), "--metric", "bin-error", "--shared-scale", "--out", p(&s3)];
    ok(&args);
    let grids: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(s3.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(grids.len(), 3);
    for stem in ["bin_error_clean", "bin_error_mixture", "bin_error_processed"] {
        let csv = fs::read_to_string(s3.join(format!("{stem}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(s3.join(format!("{stem}.png")).exists());
    }
    // the clean grid at sigma 0 is exactly zero, so on a shared scale it is black
    let clean_png = fs::read(s3.join("bin_error_clean.png")).unwrap();
    let s3b = tmp.path().join("s3b");
    let mut again = args;
    again[args.len() - 1] = p(&s3b);
    ok(&again);
    assert_eq!(clean_png, fs::read(s3b.join("bin_error_clean.png")).unwrap());
    assert_eq!(fs::read(s3.join("sweep.json")).unwrap(), fs::read(s3b.join("sweep.json")).unwrap());
}
