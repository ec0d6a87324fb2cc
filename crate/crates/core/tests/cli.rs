use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pacset(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacset")).args(args).current_dir(dir).output().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

fn categorical_line(id: &str, probs: &[f64], label: usize) -> String {
    let payload: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    serde_json::json!({"id": id, "kind": "categorical", "payload": payload, "true_label": label}).to_string()
}

#[test]
fn alpha_reports_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = pacset(dir.path(), &["alpha", "--n", "1000", "--epsilon", "0.05", "--delta", "0.01"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["k_star"], 34);
    assert_eq!(v["bound"], "direct");
}

#[test]
fn infeasible_exits_two_with_minimum_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = pacset(dir.path(), &["alpha", "--n", "100", "--epsilon", "0.01", "--delta", "1e-5"]);
    assert_eq!(out.status.code(), Some(2));
    let v = json(&out);
    assert_eq!(v["infeasible"], true);
    assert_eq!(v["min_n_direct"], 1146);
    assert_eq!(v["min_n_vc"], 271024);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pacset(dir.path(), &["alpha", "--n", "ten"]).status.code(), Some(1));
    assert_eq!(pacset(dir.path(), &["alpha", "--n", "10", "--epsilon", "1.5", "--delta", "0.1"]).status.code(), Some(1));
    assert_eq!(pacset(dir.path(), &["--help"]).status.code(), Some(0));
    write(dir.path(), "bad.toml", "bogus = 1\n");
    let out = pacset(dir.path(), &["alpha", "--config", "bad.toml", "--n", "5", "--epsilon", "0.1", "--delta", "0.1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn explicit_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", "epsilon = 0.3\ndelta = 0.1\nn = 50\n");
    let from_file = json(&pacset(dir.path(), &["alpha", "--config", "c.toml"]));
    assert_eq!(from_file["epsilon"], 0.3);
    assert_eq!(from_file["k_star"], 10);
    let overridden = json(&pacset(dir.path(), &["alpha", "--config", "c.toml", "--epsilon", "0.1"]));
    assert_eq!(overridden["epsilon"], 0.1);
    assert_eq!(overridden["n"], 50);
    assert_eq!(overridden["k_star"], 1);
}

#[test]
fn hand_traced_fit() {
    let dir = tempfile::tempdir().unwrap();
    let lines: Vec<String> = [0.9, 0.8, 0.7, 0.05]
        .iter()
        .enumerate()
        .map(|(i, p)| categorical_line(&format!("v{i}"), &[*p, 1.0 - p], 0))
        .collect();
    write(dir.path(), "val.jsonl", &(lines.join("\n") + "\n"));
    let out = pacset(
        dir.path(),
        &["fit", "--validation", "val.jsonl", "--epsilon", "0.9", "--delta", "0.01", "--no-calibrate"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["k_star"], 1);
    assert_eq!(v["T_hat"].as_f64().unwrap(), -(0.7f64.ln()));
}

#[test]
fn schema_errors_exit_three_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.jsonl", &format!("{}\n{{\"id\":\"b\",\"kind\":\"categorical\"}}\n", categorical_line("a", &[0.6, 0.4], 0)));
    let out = pacset(dir.path(), &["fit", "--validation", "bad.jsonl", "--epsilon", "0.9", "--delta", "0.5", "--no-calibrate"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn overlapping_calibration_and_validation_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let lines: Vec<String> = (0..20).map(|i| categorical_line(&format!("x{i}"), &[0.7, 0.3], i % 2)).collect();
    write(dir.path(), "all.jsonl", &(lines.join("\n") + "\n"));
    let out = pacset(
        dir.path(),
        &["fit", "--calibration", "all.jsonl", "--validation", "all.jsonl", "--epsilon", "0.5", "--delta", "0.1"],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn predict_then_eval_matches_direct_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (tag, n, seed) in [("c", "600", "1"), ("v", "600", "2"), ("t", "300", "3")] {
        let out = pacset(d, &["generate", "--world", "gaussian", "--n", n, "--seed", seed, "--tag", tag, "-o", &format!("{tag}.jsonl")]);
        assert_eq!(out.status.code(), Some(0));
    }
    let fit = pacset(
        d,
        &["fit", "--calibration", "c.jsonl", "--validation", "v.jsonl", "--epsilon", "0.1", "--delta", "0.05", "-o", "art.json"],
    );
    assert_eq!(fit.status.code(), Some(0), "{}", String::from_utf8_lossy(&fit.stderr));
    assert_eq!(pacset(d, &["predict", "--artifact", "art.json", "--input", "t.jsonl", "-o", "pred.jsonl"]).status.code(), Some(0));
    let direct = json(&pacset(d, &["eval", "--artifact", "art.json", "--input", "t.jsonl"]));
    let replay = json(&pacset(d, &["eval", "--predictions", "pred.jsonl", "--epsilon", "0.1"]));
    assert_eq!(direct, replay);
    assert_eq!(direct["n"], 300);
}
