use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn flowsac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowsac"))
        .args(args)
        .env("FLOWSAC_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &TempDir, body: &str) -> PathBuf {
    let path = dir.path().join("config.json");
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{
  "system": { "preset": "quickstart_2d" },
  "episodes": 0,
  "seed": 3,
  "evaluate": { "n_traj": 3, "traj_len": 50, "n_action_samples": 2000 }
}"#;

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(flowsac(&[]).status.code(), Some(1));
    assert_eq!(flowsac(&["train"]).status.code(), Some(1));
    assert_eq!(flowsac(&["nonsense"]).status.code(), Some(1));
    assert_eq!(flowsac(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, r#"{ "system": { "preset": "scalar" }, "episodez": 10 }"#);
    let out = flowsac(&["oracle", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("episodez"));
}

#[test]
fn oracle_prints_the_scalar_solution() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        r#"{ "system": { "preset": "scalar" }, "seed": 0, "oracle": { "return_n_traj": 20 } }"#,
    );
    let out_dir = dir.path().join("o");
    let out = flowsac(&["oracle", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let p = report["P"][0][0].as_f64().unwrap();
    assert!((p - 1.58840).abs() < 1e-4, "P* = {p}");
    assert!(out_dir.join("oracle.json").exists());
    assert!(out_dir.join("oracle.ckpt").exists());
}

#[test]
fn refuses_non_empty_output_directory() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, SMALL);
    let out_dir = dir.path().join("busy");
    fs::create_dir(&out_dir).unwrap();
    fs::write(out_dir.join("keep.txt"), "x").unwrap();
    let out = flowsac(&["train", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read_to_string(out_dir.join("keep.txt")).unwrap(), "x");
    assert_eq!(fs::read_dir(&out_dir).unwrap().count(), 1);
}

#[test]
fn zero_episodes_writes_header_only_log() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, SMALL);
    let out_dir = dir.path().join("t");
    let out = flowsac(&["train", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert_eq!(log.trim_end(), flowsac::commands::TRAIN_LOG_HEADER);
    assert!(out_dir.join("final.ckpt").exists());
}

#[test]
fn single_action_sample_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, SMALL);
    let oracle_dir = dir.path().join("o");
    assert!(flowsac(&["oracle", "--config", s(&cfg), "--out", s(&oracle_dir)])
        .status
        .success());
    let ckpt = oracle_dir.join("oracle.ckpt");
    let out = flowsac(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--n-action-samples",
        "1",
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("e").exists());
}

#[test]
fn optimal_gaussian_checkpoint_evaluates_to_sampling_noise() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, SMALL);
    let oracle_dir = dir.path().join("o");
    let out = flowsac(&["oracle", "--config", s(&cfg), "--out", s(&oracle_dir)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let trace: f64 = (0..2).map(|i| report["Sigma"][i][i].as_f64().unwrap()).sum();
    let eval_dir = dir.path().join("e");
    let out = flowsac(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&oracle_dir.join("oracle.ckpt")),
        "--out",
        s(&eval_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let states = fs::read_to_string(eval_dir.join("eval_states.csv")).unwrap();
    let mut lines = states.lines();
    assert_eq!(lines.next().unwrap(), "traj,t,x0,x1,mu_hat0,mu_hat1,dist_mu,dist_sigma");
    let bound = 4.0 * (trace / 2000.0).sqrt();
    let mut n = 0;
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[6] < bound, "dist_mu {} above {bound} at {line}", cols[6]);
        assert!(cols[7] < 0.1, "dist_sigma {} at {line}", cols[7]);
        n += 1;
    }
    assert_eq!(n, 150);
    let summary = fs::read_to_string(eval_dir.join("eval_summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), flowsac::evaluate::SUMMARY_HEADER);
    assert_eq!(String::from_utf8_lossy(&out.stdout), summary);
}

#[test]
fn seed_flag_changes_training_output() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        r#"{ "system": { "preset": "scalar" }, "episodes": 20, "seed": 1,
             "sac": { "batch_size": 8, "hidden_pi": [4], "hidden_q": [4], "eval_every": 10,
                      "eval_n_traj": 2, "eval_horizon": 5, "q_warmup_episodes": 5 } }"#,
    );
    let run = |seed: &str, name: &str| {
        let out_dir = dir.path().join(name);
        let out = flowsac(&["train", "--config", s(&cfg), "--seed", seed, "--out", s(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(out_dir.join("final.ckpt")).unwrap()
    };
    assert_eq!(run("1", "a"), run("1", "b"));
    assert_ne!(run("1", "c"), run("2", "d"));
}
