//! End-to-end tests of the `hmmrf` binary: generate, train, classify,
//! evaluate, and the exit-code contract (0 success, 1 runtime failure, 2
//! usage error).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hmmrf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmmrf"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn assert_success(output: &Output) {
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout(output),
        stderr(output)
    );
}

fn gen_small_corpus(dir: &Path, separation: &str, seed: &str) {
    let out = hmmrf(
        &[
            "gen-corpus",
            "--families",
            "2",
            "--samples",
            "12",
            "--states",
            "3",
            "--symbols",
            "12",
            "--len",
            "60:90",
            "--separation",
            separation,
            "--seed",
            seed,
            "--out",
            "corpus",
        ],
        dir,
    );
    assert_success(&out);
}

const TRAIN_ARGS: &[&str] = &[
    "train",
    "--corpus",
    "corpus",
    "--L",
    "20",
    "--states",
    "2",
    "--trees",
    "10",
    "--criterion",
    "gini",
    "--max-features",
    "sqrt",
    "--epsilon",
    "0.001",
    "--min-iters",
    "3",
    "--max-iters",
    "30",
    "--seed",
    "5",
    "--out",
    "out/model.json",
];

#[test]
fn full_flow_gen_train_classify_eval() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_corpus(dir.path(), "1.0", "5");
    assert!(dir.path().join("corpus/_planted.json").is_file());
    assert!(dir.path().join("corpus/manifest.json").is_file());

    let trained = hmmrf(TRAIN_ARGS, dir.path());
    assert_success(&trained);
    let text = stdout(&trained);
    assert!(text.contains("held-out accuracy:"), "stdout: {text}");
    for artifact in [
        "out/model.json",
        "out/model.report.json",
        "out/model.manifest.json",
        "out/dropped.csv",
    ] {
        assert!(dir.path().join(artifact).is_file(), "missing {artifact}");
    }

    // Classifying a disjoint-support training sample recovers its family.
    let classified = hmmrf(
        &[
            "classify",
            "--model",
            "out/model.json",
            "corpus/fam00/s0000.opseq",
            "corpus/fam01/s0000.opseq",
        ],
        dir.path(),
    );
    assert_success(&classified);
    let lines: Vec<String> = stdout(&classified).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("fam00"), "line: {}", lines[0]);
    assert!(lines[1].contains("fam01"), "line: {}", lines[1]);

    // JSON mode parses line by line.
    let as_json = hmmrf(
        &[
            "classify",
            "--model",
            "out/model.json",
            "--json",
            "corpus/fam00/s0001.opseq",
        ],
        dir.path(),
    );
    assert_success(&as_json);
    let value: serde_json::Value = serde_json::from_str(stdout(&as_json).lines().next().unwrap())
        .expect("classify --json emits valid JSON");
    assert_eq!(value["family"], "fam00");
    assert!(value["votes"].is_array());

    let evaluated = hmmrf(
        &[
            "eval",
            "--model",
            "out/model.json",
            "--corpus",
            "corpus",
            "--out",
            "out/report.json",
        ],
        dir.path(),
    );
    assert_success(&evaluated);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    assert!(report["accuracy"].as_f64().unwrap() > 0.9);
    assert!(report.get("confusion").is_some());
    assert!(report.get("scaled_confusion").is_some());
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hmmrf(&["gen-corpus", "--families", "2"], dir.path());
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn oversized_l_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_corpus(dir.path(), "0.8", "6");
    let mut args = TRAIN_ARGS.to_vec();
    args[4] = "10000"; // --L larger than every sample
    let out = hmmrf(&args, dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("error:"), "stderr: {}", stderr(&out));
}

#[test]
fn rerun_reproduces_fingerprint_and_model_bytes() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_corpus(dir.path(), "0.7", "9");
    let manifest_a: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("corpus/manifest.json")).unwrap())
            .unwrap();

    let again = tempfile::tempdir().unwrap();
    gen_small_corpus(again.path(), "0.7", "9");
    let manifest_b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(again.path().join("corpus/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(
        manifest_a["corpus_fingerprint"],
        manifest_b["corpus_fingerprint"]
    );

    let mut args = TRAIN_ARGS.to_vec();
    let last = args.len() - 1;
    args[last] = "out/a.json";
    assert_success(&hmmrf(&args, dir.path()));
    args[last] = "out/b.json";
    assert_success(&hmmrf(&args, dir.path()));
    let a = fs::read(dir.path().join("out/a.json")).unwrap();
    let b = fs::read(dir.path().join("out/b.json")).unwrap();
    assert_eq!(a, b, "same seed and corpus must give byte-identical models");
}

#[test]
fn classify_reports_short_files_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_corpus(dir.path(), "1.0", "8");
    assert_success(&hmmrf(TRAIN_ARGS, dir.path()));
    fs::write(dir.path().join("tiny.opseq"), "OP001\nOP002\n").unwrap();

    let out = hmmrf(
        &[
            "classify",
            "--model",
            "out/model.json",
            "tiny.opseq",
            "corpus/fam00/s0002.opseq",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "one line per file: {text}");
    assert!(lines[0].contains("tiny.opseq") && lines[0].contains("error"));
    assert!(lines[1].contains("fam00"));
}

#[test]
fn eval_rejects_corpus_with_no_usable_samples() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_corpus(dir.path(), "0.9", "4");
    assert_success(&hmmrf(TRAIN_ARGS, dir.path()));

    fs::create_dir_all(dir.path().join("empty/famX")).unwrap();
    let out = hmmrf(
        &[
            "eval",
            "--model",
            "out/model.json",
            "--corpus",
            "empty",
            "--out",
            "report.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn raw_baseline_and_sequential_threads_work() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_corpus(dir.path(), "1.0", "3");
    let mut args = TRAIN_ARGS.to_vec();
    args.extend(["--baseline", "raw"]);
    let out = Command::new(env!("CARGO_BIN_EXE_hmmrf"))
        .args(&args)
        .env("HMMRF_THREADS", "0")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_success(&out);
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/model.json")).unwrap())
            .unwrap();
    assert_eq!(model["version"], "rawrf-1");
}

#[test]
fn grid_writes_results_and_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_corpus(dir.path(), "1.0", "2");
    let out = hmmrf(
        &[
            "grid",
            "--corpus",
            "corpus",
            "--L",
            "10,20",
            "--trees",
            "2,8",
            "--criterion",
            "gini,entropy",
            "--max-features",
            "sqrt",
            "--kind",
            "hmm-rf",
            "--states",
            "2",
            "--min-iters",
            "3",
            "--max-iters",
            "25",
            "--seed",
            "2",
            "--out-dir",
            "gridout",
        ],
        dir.path(),
    );
    assert_success(&out);
    assert!(stdout(&out).contains("best cell:"));
    let results = fs::read_to_string(dir.path().join("gridout/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 2 * 2);
    for sweep in [
        "sweep_L.csv",
        "sweep_n_estimators.csv",
        "sweep_criterion.csv",
        "sweep_max_features.csv",
    ] {
        assert!(dir.path().join("gridout").join(sweep).is_file());
    }
    let best: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gridout/best_model.json")).unwrap())
            .unwrap();
    assert_eq!(best["version"], "hmmrf-1");
    // Reporting-on-selection mode warns; no holdout report exists.
    assert!(stdout(&out).contains("optimistic"));
    assert!(!dir.path().join("gridout/holdout_report.json").exists());
}

#[test]
fn grid_with_holdout_scores_untouched_samples() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_corpus(dir.path(), "1.0", "14");
    let out = hmmrf(
        &[
            "grid",
            "--corpus",
            "corpus",
            "--L",
            "15",
            "--trees",
            "5",
            "--criterion",
            "gini",
            "--max-features",
            "sqrt",
            "--states",
            "2",
            "--min-iters",
            "3",
            "--max-iters",
            "25",
            "--seed",
            "14",
            "--holdout-fraction",
            "0.25",
            "--out-dir",
            "gridout",
        ],
        dir.path(),
    );
    assert_success(&out);
    assert!(stdout(&out).contains("holdout accuracy"));
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("gridout/holdout_report.json")).unwrap(),
    )
    .unwrap();
    // 12 samples per family, 25% carved: 3 holdout samples per family.
    let support: u64 = report["per_class"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["support"].as_u64().unwrap())
        .sum();
    assert_eq!(support, 6);
    assert!(report["accuracy"].as_f64().unwrap() > 0.9);
}
