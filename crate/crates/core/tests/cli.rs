use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csvscale::cli::PredictionLine;
use csvscale::optimizer::{FitReport, SplitEvaluation};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn csvscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csvscale"))
        .args(args)
        .env_remove("CSVSCALE_THREADS")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_accepts_six_char_fixture() {
    let out = csvscale(&[
        "validate",
        "--corpus",
        s(&fixture("six_char.jsonl")),
        "--losses",
        s(&fixture("six_char.losses.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("1 samples, 6 chars"), "{stdout}");
    assert!(stdout.contains("2 models, 2 complete"), "{stdout}");
}

#[test]
fn validate_rejects_gap_naming_the_sample() {
    let out = csvscale(&["validate", "--corpus", s(&fixture("gap.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("gap-sample"), "{stderr}");
}

#[test]
fn missing_file_is_io_error_and_bad_flag_is_usage_error() {
    let out = csvscale(&["validate", "--corpus", "/nonexistent/corpus.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    let out = csvscale(&["validate", "--corpus", s(&fixture("six_char.jsonl")), "--frob"]);
    assert_eq!(out.status.code(), Some(1));
    let out = csvscale(&["fit", "--corpus", s(&fixture("six_char.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn map_writes_target_space_losses() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("mapped.jsonl");
    let out = csvscale(&[
        "map",
        "--corpus",
        s(&fixture("six_char.jsonl")),
        "--losses",
        s(&fixture("six_char.losses.jsonl")),
        "--out",
        s(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_path).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["token_nll"], serde_json::json!([0.6, 0.8]));
    assert_eq!(lines[0]["source_spans"], serde_json::json!([[0, 2], [2, 6]]));
    // m2: chars [0.1, 0.45, 0.45, 0.1, 0.1, 0.1] summed over [0,2) and [2,6).
    let m2: Vec<f64> = serde_json::from_value(lines[1]["token_nll"].clone()).unwrap();
    assert!((m2[0] - 0.55).abs() < 1e-15 && (m2[1] - 0.75).abs() < 1e-15, "{m2:?}");
}

fn synth_family(dir: &Path, noise: &str) -> PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, format!("{{\"accuracy_noise\": {noise}}}")).unwrap();
    let fam = dir.join("fam");
    let out = csvscale(&["synth", "--spec", s(&spec), "--out", s(&fam)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    fam
}

fn fit_csv(dir: &Path, fam: &Path) -> PathBuf {
    let config = dir.join("config.json");
    std::fs::write(&config, "{\"learning_rate\": 0.1}").unwrap();
    let model = dir.join("csv");
    let out = csvscale(&[
        "fit",
        "--corpus",
        s(&fam.join("corpus.jsonl")),
        "--losses",
        s(&fam.join("losses.jsonl")),
        "--evals",
        s(&fam.join("evals.jsonl")),
        "--tasks",
        s(&fam.join("tasks.jsonl")),
        "--method",
        "csv",
        "--config",
        s(&config),
        "--out",
        s(&model),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    model
}

#[test]
fn fit_then_evaluate_recovers_noise_free_family() {
    let dir = tempfile::tempdir().unwrap();
    let fam = synth_family(dir.path(), "0");
    let model = fit_csv(dir.path(), &fam);
    let out = csvscale(&[
        "evaluate",
        "--model",
        s(&model),
        "--corpus",
        s(&fam.join("corpus.jsonl")),
        "--losses",
        s(&fam.join("losses.jsonl")),
        "--evals",
        s(&fam.join("evals.jsonl")),
        "--split",
        "test",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: SplitEvaluation = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!eval.rows.is_empty());
    assert!(eval.mse <= 1e-6, "test MSE {}", eval.mse);
}

#[test]
fn predict_reproduces_fit_report() {
    let dir = tempfile::tempdir().unwrap();
    let fam = synth_family(dir.path(), "0.01");
    let model = fit_csv(dir.path(), &fam);
    let report = FitReport::load(model.join("report.json")).unwrap();
    let out = csvscale(&[
        "predict",
        "--model",
        s(&model),
        "--corpus",
        s(&fam.join("corpus.jsonl")),
        "--losses",
        s(&fam.join("losses.jsonl")),
        "--evals",
        s(&fam.join("evals.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<PredictionLine> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), report.rows.len());
    for (line, row) in lines.iter().zip(&report.rows) {
        assert_eq!(line.model_id, row.model_id);
        assert!((line.predicted - row.predicted).abs() <= 1e-12);
        assert_eq!(line.observed, Some(row.observed));
    }
}

#[test]
fn degenerate_fit_exits_with_fitting_code() {
    let dir = tempfile::tempdir().unwrap();
    let evals = dir.path().join("evals.jsonl");
    // Every model has the same loss, so every score ties.
    let mut loss_lines = String::new();
    let mut eval_lines = String::new();
    for i in 0..4 {
        loss_lines += &format!(
            "{{\"model_id\": \"m{i}\", \"sample_id\": \"s1\", \"source_spans\": [[0, 6]], \"token_nll\": [1.2]}}\n"
        );
        eval_lines += &format!(
            "{{\"model_id\": \"m{i}\", \"task_id\": \"gsm8k\", \"accuracy\": 0.{i}5, \"split\": \"train\"}}\n"
        );
    }
    let losses = dir.path().join("losses.jsonl");
    std::fs::write(&losses, loss_lines).unwrap();
    std::fs::write(&evals, eval_lines).unwrap();
    let out = csvscale(&[
        "baseline",
        "--corpus",
        s(&fixture("six_char.jsonl")),
        "--losses",
        s(&losses),
        "--evals",
        s(&evals),
        "--task-id",
        "gsm8k",
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn threads_env_fallback_is_accepted() {
    let out = Command::new(env!("CARGO_BIN_EXE_csvscale"))
        .args(["validate", "--corpus", s(&fixture("six_char.jsonl"))])
        .env("CSVSCALE_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}
