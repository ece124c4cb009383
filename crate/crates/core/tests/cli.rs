use fsnids::evaluator::MetricsReport;
use fsnids::flowset::TokenizedDataset;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsnids"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

/// Count printed on the summary row named `name`.
fn summary_count(stdout: &str, name: &str) -> Option<usize> {
    stdout.lines().find_map(|l| {
        let mut parts = l.split_whitespace();
        (parts.next() == Some(name)).then(|| parts.next()?.parse().ok())?
    })
}

const TINY_CONFIG: &str = "profile = \"desk\"\nseed = 3\n\n[schedule]\nmlm_pretrain = 2\nhead_only = 2\njoint = 2\n";

/// Ingests the 10-row fixture and trains a model for a few iterations.
fn tiny_model(dir: &Path) {
    std::fs::write(dir.join("run.toml"), TINY_CONFIG).unwrap();
    let ingest = fixture("ingest_10.csv");
    ok(dir, &["--config", "run.toml", "ingest", ingest.to_str().unwrap(), "--out", "cache/train.flowset"]);
    ok(dir, &["--config", "run.toml", "pretrain"]);
    ok(dir, &["--config", "run.toml", "finetune"]);
}

#[test]
fn ingest_reports_class_split() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("ingest_10.csv");
    let stdout = ok(dir.path(), &["ingest", input.to_str().unwrap(), "--out", "flows.flowset"]);
    for (name, n) in [
        ("normal", 4),
        ("unknown", 1),
        ("portScan", 3),
        ("pingScan", 1),
        ("suspicious", 1),
        ("benign", 5),
        ("malicious", 5),
        ("total", 10),
    ] {
        assert_eq!(summary_count(&stdout, name), Some(n), "{name} in\n{stdout}");
    }
    let data = TokenizedDataset::load(&dir.path().join("flows.flowset")).unwrap();
    assert_eq!(data.len(), 10);
    assert!(fsnids::pipeline::flowset_vocab_path(&dir.path().join("flows.flowset")).exists());
}

#[test]
fn repeated_ingest_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("ingest_10.csv");
    ok(dir.path(), &["ingest", input.to_str().unwrap(), "--out", "a/flows.flowset"]);
    ok(dir.path(), &["ingest", input.to_str().unwrap(), "--out", "b/flows.flowset"]);
    let listing = |d: &str| {
        let mut names: Vec<_> = std::fs::read_dir(dir.path().join(d))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .filter(|n| !n.to_string_lossy().starts_with('.'))
            .collect();
        names.sort();
        names
    };
    assert_eq!(listing("a"), listing("b"));
    for name in listing("a") {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(&name)).unwrap(),
            std::fs::read(dir.path().join("b").join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn missing_class_column_names_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("no_class_column.csv");
    let stderr = err(dir.path(), &["ingest", input.to_str().unwrap(), "--out", "flows.flowset"]);
    assert!(stderr.contains("class"), "{stderr}");
    assert!(!dir.path().join("flows.flowset").exists());
}

#[test]
fn missing_prerequisites_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let stderr = err(dir.path(), &["pretrain"]);
    assert!(stderr.contains("train.flowset"), "{stderr}");
    let stderr = err(dir.path(), &["finetune"]);
    assert!(stderr.contains("pretrained.ckpt"), "{stderr}");
    let stderr = err(dir.path(), &["evaluate"]);
    assert!(stderr.contains("finetuned.ckpt"), "{stderr}");
    let table = fixture("table_sequence.csv");
    let stderr = err(dir.path(), &["predict", table.to_str().unwrap()]);
    assert!(stderr.contains("finetuned.ckpt"), "{stderr}");
}

#[test]
fn predict_emits_one_row_per_flow_in_order() {
    let dir = tempfile::tempdir().unwrap();
    tiny_model(dir.path());
    let table = fixture("table_sequence.csv");
    let stdout = ok(dir.path(), &["--config", "run.toml", "predict", table.to_str().unwrap()]);
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("index\tlabel\tp_malicious"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 10);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], i.to_string());
        assert!(row[1] == "benign" || row[1] == "malicious", "{row:?}");
        let p: f64 = row[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(row[1] == "malicious", p >= 0.5, "{row:?}");
    }
}

#[test]
fn evaluate_writes_all_four_metrics() {
    let dir = tempfile::tempdir().unwrap();
    tiny_model(dir.path());
    ok(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "evaluate",
            "--data",
            "cache/train.flowset",
            "--baseline-train",
            "cache/train.flowset",
        ],
    );
    let text = std::fs::read_to_string(dir.path().join("reports/metrics.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["accuracy", "precision", "recall", "f1"] {
        assert!(json["metrics"].get(key).is_some(), "{key} missing in {text}");
    }
    let report = MetricsReport::from_json(&text).unwrap();
    assert_eq!(report.flows, 10);
    assert!(dir.path().join("reports/metrics-baseline.json").exists());
}

#[test]
fn synth_writes_corpus_splits_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--flows", "3000", "--test-flows", "1000", "--out", "data/s.csv"]);
    for name in ["s.csv", "s-test.csv", "s-test-shifted.csv"] {
        let csv = dir.path().join("data").join(name);
        assert!(csv.exists(), "{name}");
        assert!(fsnids::synthgen::truth_path(&csv).exists(), "{name} truth");
    }
    let stdout = ok(dir.path(), &["ingest", "data/s-test.csv", "--out", "t.flowset"]);
    assert_eq!(summary_count(&stdout, "total"), Some(1000));
}

#[test]
fn paper_profile_refuses_overrides_in_dry_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "profile = \"paper\"\n\n[schedule]\njoint = 10\n").unwrap();
    let input = fixture("ingest_10.csv");
    let stderr = err(dir.path(), &["--config", "run.toml", "dry-run", input.to_str().unwrap()]);
    assert!(stderr.contains("paper profile was overridden"), "{stderr}");
}
