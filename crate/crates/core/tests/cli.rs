use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[encoder]
d = 8
heads = 2
b_d = 400
r = 0.01
n_distill = 2
epochs = 1

[analyzer]
heads = 2
n_cross = 1
n_self = 1
epochs = 2
val_size = 20

[synth]
n = 1200
m = 80
pairs = 4
"#;

fn ace(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ace"))
        .current_dir(dir)
        .args(["--config", "cfg.toml", "--out", "out"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ace(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    dir
}

fn pipeline(dir: &Path) {
    ok(dir, &["--seed", "5", "synth"]);
    ok(dir, &["--seed", "5", "gen-workload", "--n", "40", "--ratios", "3:2:2"]);
    ok(dir, &["--seed", "5", "train-encoder"]);
    ok(dir, &["--seed", "5", "train-analyzer"]);
}

#[test]
fn usage_errors_exit_2() {
    let dir = workspace();
    assert_eq!(ace(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(ace(dir.path(), &["gen-workload", "--ratios", "3:2"]).status.code(), Some(2));
    assert_eq!(ace(dir.path(), &["estimate", "--op", "intersect", "--elements", "a"]).status.code(), Some(2));
}

#[test]
fn bench_without_model_exits_1() {
    let dir = workspace();
    ok(dir.path(), &["synth"]);
    let out = ace(dir.path(), &["bench"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-analyzer"));
}

#[test]
fn missing_corpus_exits_1() {
    let dir = workspace();
    assert_eq!(ace(dir.path(), &["train-encoder"]).status.code(), Some(1));
}

#[test]
fn end_to_end_pipeline() {
    let dir = workspace();
    let d = dir.path();
    pipeline(d);
    let est: serde_json::Value =
        serde_json::from_str(&ok(d, &["estimate", "--op", "overlap", "--elements", "e0,e1", "--truth", "10"])).unwrap();
    let e = est["estimate"].as_f64().unwrap();
    assert!((1.0..=1200.0).contains(&e));
    assert!(est["qerror"].as_f64().unwrap() >= 1.0);

    ok(d, &["bench"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("out/report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["estimators"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["estimator"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["ace", "independence", "sampling"]);
    assert!(d.join("out/report.csv").exists());

    fs::write(
        d.join("up.jsonl"),
        "{\"op\":\"insert\",\"id\":5000,\"elements\":[\"e0\",\"e3\"]}\n{\"op\":\"delete\",\"id\":7}\n{\"op\":\"delete\",\"id\":99999}\n",
    )
    .unwrap();
    let up: serde_json::Value =
        serde_json::from_str(&ok(d, &["update", "--file", "up.jsonl", "--workload", "out/workload.jsonl"])).unwrap();
    assert_eq!(up["inserted"], 1);
    assert_eq!(up["deleted"], 1);
    assert_eq!(up["unknown_ids"], serde_json::json!([99999]));
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (workspace(), workspace());
    pipeline(a.path());
    pipeline(b.path());
    for file in [
        "out/corpus.json",
        "out/workload.jsonl",
        "out/encoder/encoder.ace",
        "out/distilled.ace",
        "out/analyzer-subset.ace",
        "out/analyzer-superset.ace",
        "out/analyzer-overlap.ace",
    ] {
        let (x, y) = (fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap());
        assert!(x == y, "{file} differs between runs");
    }
}

#[test]
fn flags_override_config_seed() {
    let (a, b) = (workspace(), workspace());
    fs::write(b.path().join("cfg.toml"), format!("seed = 5\n{CONFIG}")).unwrap();
    ok(a.path(), &["--seed", "5", "synth"]);
    ok(b.path(), &["synth"]);
    let (x, y) = (
        fs::read(a.path().join("out/corpus.json")).unwrap(),
        fs::read(b.path().join("out/corpus.json")).unwrap(),
    );
    assert_eq!(x, y);
    ok(b.path(), &["--seed", "6", "synth"]);
    assert_ne!(x, fs::read(b.path().join("out/corpus.json")).unwrap());
}
