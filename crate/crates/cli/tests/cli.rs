use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kaliko(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kaliko"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn gen_small_data(dir: &Path) {
    let out = kaliko(&[
        "gen-data",
        "--system",
        "vdp",
        "--out",
        dir.to_str().unwrap(),
        "--n-traj",
        "3",
        "--steps",
        "60",
        "--dt",
        "0.05",
        "--seed",
        "7",
    ]);
    assert_ok(&out);
}

const SMALL_CONFIG: &str = r#"{
  "model": { "n_d": 2, "ell": 4, "c": 2, "hidden": 8 },
  "train": { "steps": 2, "window_len": 6, "batch": 2, "seed": 3 },
  "seed": 11
}"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, SMALL_CONFIG).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_writes_files_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data);
    for name in ["traj_0000.csv", "traj_0001.csv", "traj_0002.csv", "manifest.json", "run_config.json"] {
        assert!(data.join(name).exists(), "{name} missing");
    }
    let first = fs::read_to_string(data.join("traj_0000.csv")).unwrap();
    assert!(first.starts_with("t,x1,x2\n"));
    // 60 steps → 61 states + header.
    assert_eq!(first.lines().count(), 62);
}

#[test]
fn gen_data_same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small_data(&a);
    gen_small_data(&b);
    assert_eq!(
        fs::read(a.join("traj_0002.csv")).unwrap(),
        fs::read(b.join("traj_0002.csv")).unwrap()
    );
}

#[test]
fn unknown_system_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kaliko(&["gen-data", "--system", "lorenz", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn invalid_thread_cap_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kaliko"))
        .env("KALIKO_THREADS", "zero")
        .args(["gen-data", "--system", "vdp", "--out", tmp.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_checkpoint_report_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data);
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    let out = kaliko(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(run.join("checkpoint.klko").exists());
    let report = fs::read_to_string(run.join("train_report.csv")).unwrap();
    assert!(report.starts_with("step,loss_filter,loss_pred,grad_norm,wall_ms\n"));
    assert_eq!(report.lines().count(), 3, "two steps logged");
    let rc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(rc["command"], "train");
    assert_eq!(rc["config"]["train"]["steps"], 2);
}

#[test]
fn zero_step_training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data);
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{ "model": { "n_d": 2, "ell": 4, "c": 2, "hidden": 8 }, "train": { "steps": 0, "window_len": 6, "batch": 2 }, "seed": 5 }"#,
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = kaliko(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    assert_eq!(
        fs::read(a.join("checkpoint.klko")).unwrap(),
        fs::read(b.join("checkpoint.klko")).unwrap()
    );
}

#[test]
fn missing_data_dir_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = kaliko(&[
        "train",
        "--data",
        tmp.path().join("nope").to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{ "train": { "steps": 1 }, "bogus": true }"#).unwrap();
    let out = kaliko(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn resume_continues_the_step_counter() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data);
    let cfg = write_config(tmp.path());
    let (first, second) = (tmp.path().join("r1"), tmp.path().join("r2"));
    let out = kaliko(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        first.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let out = kaliko(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        second.to_str().unwrap(),
        "--resume",
        first.join("checkpoint.klko").to_str().unwrap(),
    ]);
    assert_ok(&out);
    let report = fs::read_to_string(second.join("train_report.csv")).unwrap();
    let first_step: u64 = report
        .lines()
        .nth(1)
        .and_then(|l| l.split(',').next())
        .and_then(|s| s.parse().ok())
        .unwrap();
    assert_eq!(first_step, 3, "picks up after the first run's two steps");
}

/// Trains once, then exercises predict/analyze/baseline on the artifacts.
fn trained_fixture(tmp: &Path) -> (String, String) {
    let data = tmp.join("data");
    gen_small_data(&data);
    let cfg = write_config(tmp);
    let run = tmp.join("run");
    let out = kaliko(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_ok(&out);
    (
        data.to_str().unwrap().to_string(),
        run.join("checkpoint.klko").to_str().unwrap().to_string(),
    )
}

#[test]
fn predict_writes_per_trajectory_csvs_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained_fixture(tmp.path());
    let out_dir = tmp.path().join("pred");
    let out = kaliko(&[
        "predict", "--ckpt", &ckpt, "--data", &data, "--t-in", "40", "--t-out", "8", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let csv = fs::read_to_string(out_dir.join("pred_0002.csv")).unwrap();
    assert!(csv.starts_with("t,dim,truth,pred\n"));
    // 8 steps × 2 dims + header; first row is absolute index 40.
    assert_eq!(csv.lines().count(), 17);
    assert!(csv.lines().nth(1).unwrap().starts_with("40,1,"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["mse"].is_f64() && summary["mae"].is_f64());
    assert!(summary.get("raw_mse").is_none(), "raw metrics only on request");
    assert_eq!(summary["t_in"], 40);
    assert_eq!(summary["t_out"], 8);
}

#[test]
fn predict_zero_horizon_omits_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained_fixture(tmp.path());
    let out_dir = tmp.path().join("pred0");
    let out = kaliko(&[
        "predict", "--ckpt", &ckpt, "--data", &data, "--t-in", "40", "--t-out", "0", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let csv = fs::read_to_string(out_dir.join("pred_0000.csv")).unwrap();
    assert_eq!(csv, "t,dim,truth,pred\n", "header only");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary.get("mse").is_none() && summary.get("mae").is_none());
    assert_eq!(summary["t_out"], 0);
}

#[test]
fn predict_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained_fixture(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = kaliko(&[
            "predict", "--ckpt", &ckpt, "--data", &data, "--t-in", "40", "--t-out", "8", "--out",
            dir.to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());
    assert_eq!(fs::read(a.join("pred_0001.csv")).unwrap(), fs::read(b.join("pred_0001.csv")).unwrap());
}

#[test]
fn spectrum_lists_every_eigenvalue() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained_fixture(tmp.path());
    let out_dir = tmp.path().join("spec");
    let out = kaliko(&[
        "analyze", "--ckpt", &ckpt, "--mode", "spectrum", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let csv = fs::read_to_string(out_dir.join("spectrum.csv")).unwrap();
    assert!(csv.starts_with("idx,re,im,abs\n"));
    // m = n_d · ell = 8 for the fixture's architecture.
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn eig_index_out_of_range_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained_fixture(tmp.path());
    let out = kaliko(&[
        "analyze", "--ckpt", &ckpt, "--mode", "eigenfield", "--data", &data, "--eig-index", "99",
        "--grid", "2", "--out", tmp.path().join("f").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 5);
}

#[test]
fn eigenfield_csv_covers_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained_fixture(tmp.path());
    let out_dir = tmp.path().join("field");
    // Short warmup: long backward histories blow up from the box corners.
    let out = kaliko(&[
        "analyze", "--ckpt", &ckpt, "--mode", "eigenfield", "--data", &data, "--grid", "3",
        "--warmup", "4", "--svg", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let csv = fs::read_to_string(out_dir.join("eigenfield.csv")).unwrap();
    assert!(csv.starts_with("x1,x2,re,im,abs,arg\n"));
    assert_eq!(csv.lines().count(), 10, "3×3 grid, no divergent cells");
    assert!(out_dir.join("eigenfield_abs.svg").exists());
    assert!(out_dir.join("eigenfield_arg.svg").exists());
}

#[test]
fn baseline_dmd_matches_predicts_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data);
    let out_dir = tmp.path().join("dmd");
    let out = kaliko(&[
        "baseline-dmd", "--data", data.to_str().unwrap(), "--t-in", "40", "--t-out", "8",
        "--delay", "4", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let csv = fs::read_to_string(out_dir.join("pred_0000.csv")).unwrap();
    assert!(csv.starts_with("t,dim,truth,pred\n"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let keys: Vec<&str> = summary.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(keys, ["mae", "mse", "t_in", "t_out"], "same summary schema as predict");
}

#[test]
fn baseline_delay_beyond_context_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data);
    let out = kaliko(&[
        "baseline-dmd", "--data", data.to_str().unwrap(), "--t-in", "10", "--t-out", "4",
        "--delay", "10", "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_delay_suite_emits_three_rows_sharing_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data);
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{ "model": { "n_d": 2, "ell": 4, "c": 1, "hidden": 8 }, "train": { "steps": 1, "window_len": 6, "batch": 1 }, "seed": 9 }"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("abl");
    let out = kaliko(&[
        "ablate", "--suite", "delay", "--data", data.to_str().unwrap(), "--config",
        cfg.to_str().unwrap(), "--t-in", "30", "--t-out", "6", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let table = fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let variants: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(variants, ["nd1", "nd4", "nd6"]);
    let seeds: Vec<&str> = rows.iter().map(|r| r.split(',').nth(2).unwrap()).collect();
    assert!(seeds.iter().all(|&s| s == "9"), "shared seed column: {seeds:?}");
    for nd in ["nd1", "nd4", "nd6"] {
        assert!(out_dir.join(format!("ckpt_{nd}.klko")).exists());
    }
}
