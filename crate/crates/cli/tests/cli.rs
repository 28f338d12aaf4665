use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chats-lab"));
    c.env("CHATS_LAB_THREADS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

/// A config small enough for the whole pipeline to run in a second or two.
fn tiny_config(dir: &Path) -> PathBuf {
    let out = run(&["default-config"]);
    assert!(out.status.success());
    let mut c: Value = serde_json::from_slice(&out.stdout).unwrap();
    c["output_dir"] = json!(dir.join("out"));
    c["architecture"]["hidden"] = json!([16]);
    c["architecture"]["cond_dim"] = json!(4);
    c["train"]["pretrain"]["steps"] = json!(20);
    c["train"]["pretrain"]["batch_size"] = json!(16);
    for phase in ["chats", "dpo", "standard"] {
        c["train"][phase]["steps"] = json!(5);
        c["train"][phase]["batch_size"] = json!(8);
    }
    c["data"]["small_clean"]["n_pairs"] = json!(50);
    c["data"]["large_noisy"]["n_pairs"] = json!(80);
    c["guidance"]["steps"] = json!(5);
    c["eval"] = json!({
        "seeds": [0, 1],
        "conditions": [0, 1],
        "samples_per": 4,
        "reference_draws": 50,
        "reference_seed": 1
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["gen-data", "--config", cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = files_in(&a.join("data"));
    let fb = files_in(&b.join("data"));
    assert_eq!(fa.len(), 2);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn finetune_without_pretrain_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = run(&["finetune", "--config", cfg.to_str().unwrap(), "--method", "chats"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "missing_artifact");
    assert_eq!(err["requires"], "pretrain");
}

#[test]
fn sweep_writes_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for args in [
        vec!["gen-data", "--config", cfg],
        vec!["pretrain", "--config", cfg],
        vec!["finetune", "--config", cfg],
        vec!["sweep", "--config", cfg, "--values", "0,0.5"],
    ] {
        let o = run(&args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let sweep = files_in(&dir.path().join("out/sweep"));
    let name = |p: &PathBuf| p.file_name().unwrap().to_string_lossy().into_owned();
    let plot_csv = sweep.iter().find(|p| name(p).ends_with(".plot.csv")).expect("plot csv");
    let text = std::fs::read_to_string(plot_csv).unwrap();
    assert!(text.starts_with("alpha,mean_reward,win_vs_pretrained_cfg,energy_distance\n"), "{text}");
    assert_eq!(text.lines().count(), 3);
    let svg = sweep.iter().find(|p| name(p).ends_with(".svg")).expect("svg");
    let svg = std::fs::read_to_string(svg).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
    assert!(dir.path().join("out/run.log").exists());
}

#[test]
fn sample_and_eval_need_their_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let o = run(&["eval", "--config", cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "missing_artifact");
    assert!(run(&["gen-data", "--config", cfg]).status.success());
    assert!(run(&["pretrain", "--config", cfg]).status.success());
    let o = run(&["sample", "--config", cfg, "--method", "pretrained", "--n", "3", "--condition", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["sample", "--config", cfg, "--method", "dpo"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["requires"], "finetune");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["pretrain"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn bad_config_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["guidance"]["steps"] = json!(0);
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = run(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "config");
    assert_eq!(err["field"], "guidance.steps");

    let o = run(&["finetune", "--config", cfg.to_str().unwrap(), "--method", "ppo"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn plot_reports_malformed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("in.csv");
    let svg = dir.path().join("out.svg");
    std::fs::write(&csv, "alpha,mean_reward\n0,-1.0\n0.5,oops\n").unwrap();
    let o = run(&["plot", csv.to_str().unwrap(), svg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "parse");
    assert!(err["message"].as_str().unwrap().contains("3"), "{err}");
    assert!(!svg.exists());

    std::fs::write(&csv, "alpha,mean_reward\n0,-1.0\n0.5,-0.5\n").unwrap();
    let o = run(&["plot", csv.to_str().unwrap(), svg.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<polyline"));
}
