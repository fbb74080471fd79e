use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stacked-latency"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 8] = [
    "--surface-configs",
    "80",
    "--micro-configs",
    "12",
    "--fusion-configs",
    "60",
    "--iters",
    "2",
];

/// Bench and fit a small campaign into a fresh directory.
fn fitted(oracle: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["bench", "--oracle", oracle, "--out", "data", "--no-timestamps"];
    args.extend(SMALL);
    let o = run(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(
        dir.path(),
        &[
            "fit",
            "--records",
            "data/records.csv",
            "--samples",
            "data/samples.csv",
            "--out",
            "model.json",
            "--no-timestamps",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("[16, 12]"), "{}", stdout(&o));
    dir
}

#[test]
fn bench_fit_estimate_round() {
    let dir = fitted("default");
    let p = dir.path();
    assert!(p.join("data/bench.json").is_file());
    assert!(run(p, &["synth", "--seed", "3", "--out", "net.json"]).status.success());
    let o = run(
        p,
        &["estimate", "--model", "model.json", "--graph", "net.json", "--family", "refined", "--out", "report.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("total ") && line.contains(" ms (refined"), "{line}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    let layers = report["layers"].as_array().unwrap();
    assert!(!layers.is_empty());
    for key in ["name", "kind", "model_used", "t_hat_sec", "u_eff", "u_stat", "p_eff", "regime"] {
        assert!(layers[0].get(key).is_some(), "missing {key}");
    }
}

#[test]
fn outputs_are_reproducible() {
    let a = fitted("noisy");
    let b = fitted("noisy");
    for file in ["model.json", "data/records.csv", "data/samples.csv", "data/bench.json"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file} differs"
        );
    }
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("model.json")).unwrap()).unwrap();
    assert!(model["metadata"]["fitted_at"].is_null());
}

#[test]
fn evaluate_reports_every_family_per_network() {
    let dir = fitted("noisy");
    let o = run(
        dir.path(),
        &[
            "evaluate", "--model", "model.json", "--oracle", "noisy", "--synthetic", "10", "--iters", "4", "--out",
            "eval.json", "--plot", "plot.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let rows = table.lines().filter(|l| l.starts_with("synthetic")).count();
    assert_eq!(rows, 40);
    for family in ["roofline", "refined", "statistical", "mixed"] {
        assert!(table.lines().any(|l| l.starts_with(family)), "no aggregate row for {family}");
    }
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["networks"].as_array().unwrap().len(), 10);
    let plot = fs::read_to_string(dir.path().join("plot.csv")).unwrap();
    assert!(plot.starts_with("level,network,layer,kind,family,measured_ms,estimated_ms"));
}

#[test]
fn fit_on_empty_records_is_insufficient_data() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("empty.csv"), "").unwrap();
    let o = run(dir.path(), &["fit", "--records", "empty.csv", "--out", "m.json"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("insufficient data"), "{}", stderr(&o));
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn categorized_failures() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let o = run(p, &["estimate", "--model", "missing.json", "--graph", "g.json"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = run(p, &["estimate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(p, &["bench", "--oracle", "no-such-device", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    fs::write(p.join("future.json"), r#"{"version": 99}"#).unwrap();
    assert!(run(p, &["synth", "--out", "g.json"]).status.success());
    let o = run(p, &["estimate", "--model", "future.json", "--graph", "g.json"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("schema"), "{}", stderr(&o));

    fs::write(p.join("bad.json"), "{ not json").unwrap();
    let o = run(p, &["evaluate", "--model", "future.json", "--graph", "bad.json"]);
    assert!(!o.status.success());
}

#[test]
fn oracle_make_applies_overrides() {
    let dir = TempDir::new().unwrap();
    let o = run(
        dir.path(),
        &["oracle-make", "--preset", "noisy", "--s", "8,4", "--alpha", "0.5,0.25", "--out", "o.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let spec: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o.json")).unwrap()).unwrap();
    assert_eq!(spec["s"], serde_json::json!([8, 4]));
    assert_eq!(spec["noise_rel_sigma"], serde_json::json!(0.05));

    let o = run(dir.path(), &["bench", "--oracle", "o.json", "--out", "d", "--iters", "1", "--surface-configs", "20", "--micro-configs", "4", "--fusion-configs", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = run(dir.path(), &["oracle-make", "--s", "8"]);
    assert!(!o.status.success());
}
