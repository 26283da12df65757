//! The `metacl` binary: subcommands, outputs and exit codes.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::tiny_config;
use metacl::bench::ssds;

fn metacl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metacl")).args(args).output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_a_loadable_container_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = metacl(&["gen-data", "--preset", "blobs8", "--out", arg(dir.path()), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = ssds::ingest_images(dir.path().join("blobs8.ssds")).unwrap();
    assert_eq!((data.len(), data.num_classes), (2400, 8));
    let cfg = metacl::bench::config::ExperimentConfig::load(dir.path().join("config.json")).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.build_stream().unwrap().len(), 4);
}

#[test]
fn run_then_resume_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.json");
    std::fs::write(&cfg_path, tiny_config(0).to_json()).unwrap();
    let out_dir = dir.path().join("out");
    let out = metacl(&["run", "--config", arg(&cfg_path), "--out", arg(&out_dir), "--method", "single-ssl", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("single-ssl: A="));
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,task_k,A_k,F_k,seed");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.starts_with("single-ssl,") && l.ends_with(",5")));

    let again = metacl(&["resume", "--out", arg(&out_dir)]);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    assert_eq!(std::fs::read_to_string(out_dir.join("results.csv")).unwrap(), csv);
}

#[test]
fn metrics_prints_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(&path, "0.9\n0.8,0.7\n").unwrap();
    let out = metacl(&["metrics", "--matrix", arg(&path)]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("A=0.825"), "{text}");
    let f: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("F="))
        .and_then(|v| v.parse().ok())
        .expect("F line");
    assert!((f - 0.1).abs() < 1e-12, "{text}");
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(metacl(&["run", "--bogus"]).status.code(), Some(2));

    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, "{\"seed\": 0, \"surprise\": 1}").unwrap();
    let out = metacl(&["run", "--config", arg(&bad_cfg), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let mut cfg = tiny_config(0);
    cfg.data.source = metacl::bench::config::DataSource::File {
        path: dir.path().join("missing.ssds"),
    };
    let cfg_path = dir.path().join("missing.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let out = metacl(&["run", "--config", arg(&cfg_path), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(3));

    let matrix = dir.path().join("ragged.csv");
    std::fs::write(&matrix, "0.9,0.1\n").unwrap();
    assert_eq!(metacl(&["metrics", "--matrix", arg(&matrix)]).status.code(), Some(3));
    assert_eq!(metacl(&["resume", "--out", arg(&dir.path().join("nothing"))]).status.code(), Some(2));
    assert_eq!(metacl(&["run", "--config", arg(&bad_cfg), "--out", arg(dir.path()), "--method", "magic"]).status.code(), Some(2));
}
