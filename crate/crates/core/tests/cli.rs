use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use edl_core::datagen::GenConfig;
use edl_core::experiment::{ExperimentConfig, Method};
use serde_json::Value;
use tempfile::TempDir;

fn edl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = edl(args);
    assert!(
        out.status.success(),
        "edl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(line.trim()).expect("stderr is one JSON line");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn small_gen() -> GenConfig {
    GenConfig {
        num_examples: 300,
        feature_dim: 5,
        num_classes: 3,
        ..GenConfig::default()
    }
}

fn write_config(dir: &Path, name: &str, method: Method) -> String {
    let mut cfg = ExperimentConfig::synthetic(method, small_gen());
    cfg.model.hidden_dims = vec![8];
    cfg.train.epochs = 2;
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_dataset_and_truth() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("gen.json");
    fs::write(&cfg, serde_json::to_string(&small_gen()).unwrap()).unwrap();
    let out = tmp.path().join("data");
    let stdout = ok(&["gen", "--config", s(&cfg), "--out", s(&out), "--seed", "3"]);
    let summary: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(summary["examples"], 300);
    assert_eq!(summary["seed"], 3);
    let ma = summary["ma"].as_u64().unwrap();
    let nma = summary["nma"].as_u64().unwrap();
    assert_eq!(ma + nma, 300);
    let lines = fs::read_to_string(out.join("dataset.jsonl")).unwrap();
    assert!(lines.lines().next().unwrap().contains("class_names"));
    assert_eq!(lines.lines().count(), 301);
    let truth = fs::read_to_string(out.join("truth.jsonl")).unwrap();
    assert_eq!(truth.lines().count(), 300);
}

#[test]
fn gen_rejects_single_class() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("gen.json");
    let g = GenConfig {
        num_classes: 1,
        ..small_gen()
    };
    fs::write(&cfg, serde_json::to_string(&g).unwrap()).unwrap();
    let out = edl(&["gen", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(error_kind(&out), "config");
}

#[test]
fn train_then_eval_writes_report_and_curves() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "edl.json", Method::Edl);
    let out = tmp.path().join("run");
    ok(&["train", "--config", &cfg, "--out", s(&out)]);
    assert!(out.join("model.json").exists());
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);

    let stdout = ok(&["eval", "--config", &cfg, "--out", s(&out)]);
    let line: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(line["metrics"]["acc"].as_f64().is_some());
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "EDL");
    for curve in [
        "reject_accuracy",
        "reject_nll_ma",
        "reject_nll_nma",
        "ecdf_uncertainty",
        "ecdf_entropy",
        "calibration",
        "confusion",
    ] {
        assert!(out.join("curves").join(format!("{curve}.csv")).exists(), "{curve}");
    }
}

#[test]
fn eval_reproduces_report_bytes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "mle.json", Method::Mle);
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        ok(&["train", "--config", &cfg, "--out", s(&out), "--seed", "5"]);
        ok(&["eval", "--config", &cfg, "--out", s(&out), "--seed", "5"]);
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn multiple_seeds_get_their_own_directories() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "mle.json", Method::Mle);
    let out = tmp.path().join("run");
    ok(&["train", "--config", &cfg, "--out", s(&out), "--seed", "10", "--seeds", "2"]);
    assert!(out.join("seed_10").join("model.json").exists());
    assert!(out.join("seed_11").join("model.json").exists());
}

#[test]
fn sweep_over_lambda_writes_combined_table() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "edl.json", Method::Edl);
    let out = tmp.path().join("sweep");
    ok(&["sweep", "--config", &cfg, "--out", s(&out), "--axis", "lambda", "--values", "0.2,0.8"]);
    assert!(out.join("lambda_0.2").join("report.json").exists());
    assert!(out.join("lambda_0.8").join("report.json").exists());
    let mut rdr = csv::Reader::from_path(out.join("combined.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let acc: Vec<_> = rows.iter().filter(|r| &r[0] == "acc").collect();
    assert_eq!(acc.len(), 2);
    assert_eq!(&acc[0][1], "0.2");
    assert_eq!(&acc[1][1], "0.8");
    assert!(out.join("ecdf_uncertainty.csv").exists());
}

#[test]
fn lambda_sweep_rejected_for_softmax_methods() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "mle.json", Method::Mle);
    let out = edl(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        s(&tmp.path().join("sw")),
        "--axis",
        "lambda",
        "--values",
        "0.1",
    ]);
    assert_eq!(error_kind(&out), "config");
}

#[test]
fn evidential_method_with_softmax_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("bad.json");
    let mut cfg = ExperimentConfig::synthetic(Method::Edl, small_gen());
    cfg.model.output_activation = Some(edl_core::network::OutputActivation::Softmax);
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = edl(&["train", "--config", s(&path), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(error_kind(&out), "config");
    assert!(!tmp.path().join("o").join("model.json").exists());
}

#[test]
fn compare_aligns_reports_and_checks_schema() {
    let tmp = TempDir::new().unwrap();
    let mut paths = Vec::new();
    for (name, method) in [("edl", Method::Edl), ("mle", Method::Mle)] {
        let cfg = write_config(tmp.path(), &format!("{name}.json"), method);
        let out = tmp.path().join(name);
        ok(&["train", "--config", &cfg, "--out", s(&out)]);
        ok(&["eval", "--config", &cfg, "--out", s(&out)]);
        paths.push(out.join("report.json"));
    }
    let table = ok(&["compare", s(&paths[0]), s(&paths[1])]);
    let mut lines = table.lines();
    assert!(lines.next().unwrap().starts_with("method,report,"));
    assert!(lines.next().unwrap().starts_with("EDL,"));
    assert!(lines.next().unwrap().starts_with("MLE,"));

    let mut v: Value = serde_json::from_str(&fs::read_to_string(&paths[1]).unwrap()).unwrap();
    v["schema_version"] = Value::from(99);
    let bumped = tmp.path().join("bumped.json");
    fs::write(&bumped, v.to_string()).unwrap();
    let out = edl(&["compare", s(&paths[0]), s(&bumped)]);
    assert_eq!(error_kind(&out), "config");

    let mut v: Value = serde_json::from_str(&fs::read_to_string(&paths[1]).unwrap()).unwrap();
    v["metrics"].as_object_mut().unwrap().remove("acc");
    let trimmed = tmp.path().join("trimmed.json");
    fs::write(&trimmed, v.to_string()).unwrap();
    let out = edl(&["compare", s(&paths[0]), s(&trimmed)]);
    assert_eq!(error_kind(&out), "config");
}
