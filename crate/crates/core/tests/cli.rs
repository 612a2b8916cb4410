//! The `ragset` binary end to end: file formats, exit codes and
//! provenance checks.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ragset(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragset"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("spawn ragset")
}

fn ok(workdir: &Path, args: &[&str]) {
    let out = ragset(workdir, args);
    assert!(
        out.status.success(),
        "ragset {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(workdir: &Path, args: &[&str]) -> i32 {
    ragset(workdir, args).status.code().expect("exit code")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const ASYMMETRIC: &str = "\
alpha = 0.1

[synthetic]
retriever_separation = 6.0
generator_fidelity = 0.55
";

#[test]
fn default_simulation_header() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--n-records", "5"]);
    let text = fs::read_to_string(dir.path().join("data.jsonl")).unwrap();
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["m_samples"], 30);
    assert_eq!(header["k_passages"], 20);
    assert_eq!(header["schema_version"], 1);
    assert_eq!(header["provenance"]["command"], "simulate");
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn simulation_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        ok(
            dir.path(),
            &["simulate", "--n-records", "20", "--seed", "3"],
        );
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("data.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["simulate", "--n-records", "0"]), 2);
    assert_eq!(code(dir.path(), &["simulate", "--alpha", "1.5"]), 2);
    fs::write(dir.path().join("bad.toml"), "alpha = 0.1\nbogus = 1\n").unwrap();
    assert_eq!(code(dir.path(), &["simulate", "--config", "bad.toml"]), 2);
    assert_eq!(code(dir.path(), &["frobnicate"]), 2);
}

#[test]
fn missing_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["calibrate"]), 1);
    assert_eq!(
        code(dir.path(), &["simulate", "--config", "absent.toml"]),
        1
    );
}

#[test]
fn workflow_outputs_verify_and_detect_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    ok(wd, &["simulate"]);
    ok(wd, &["calibrate"]);
    ok(wd, &["predict"]);
    ok(wd, &["evaluate"]);

    let th = read_json(&wd.join("thresholds.json"));
    assert_eq!(th["schema_version"], 1);
    assert_eq!(th["n_calibration"], 300);
    let report = read_json(&wd.join("reports/coverage.json"));
    assert_eq!(report["coverage"]["n_test"], 400);
    assert!(report["coverage"]["e2e_aggregated"].as_f64().unwrap() >= 0.8);
    let predictions = fs::read_to_string(wd.join("predictions.jsonl")).unwrap();
    assert_eq!(predictions.lines().count(), 401);

    for file in [
        "data.jsonl",
        "thresholds.json",
        "predictions.jsonl",
        "reports/coverage.json",
        "reports/table.txt",
    ] {
        ok(wd, &["verify", file]);
    }

    // A hand-edited output no longer matches its recorded command.
    let path = wd.join("thresholds.json");
    let original = fs::read_to_string(&path).unwrap();
    let mut doc: Value = serde_json::from_str(&original).unwrap();
    doc["n_calibration"] = 299.into();
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    assert_eq!(code(wd, &["verify", "thresholds.json"]), 4);
    fs::write(&path, &original).unwrap();

    // Outputs derived from changed inputs are stale.
    let data = wd.join("data.jsonl");
    let mut text = fs::read_to_string(&data).unwrap();
    text.push('\n');
    fs::write(&data, text).unwrap();
    assert_eq!(code(wd, &["verify", "reports/coverage.json"]), 4);
}

#[test]
fn thresholds_for_another_backend_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    ok(wd, &["simulate"]);
    ok(wd, &["calibrate"]);
    fs::write(wd.join("other.toml"), "[backend]\nthreshold = 0.5\n").unwrap();
    assert_eq!(code(wd, &["evaluate", "--config", "other.toml"]), 4);
}

#[test]
fn pac_infeasibility_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    ok(wd, &["simulate"]);
    let out = ragset(
        wd,
        &[
            "calibrate",
            "--mode",
            "pac",
            "--delta",
            "0.01",
            "--alpha",
            "0.001",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("need n >="));
}

#[test]
fn optimized_split_is_no_larger_than_even() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    fs::write(wd.join("ragset.toml"), ASYMMETRIC).unwrap();
    ok(wd, &["simulate"]);
    ok(wd, &["calibrate", "--out", "even.json"]);
    ok(wd, &["optimize", "--out", "opt.json"]);
    ok(
        wd,
        &["evaluate", "--thresholds", "even.json", "--out", "even"],
    );
    ok(
        wd,
        &["evaluate", "--thresholds", "opt.json", "--out", "opt"],
    );
    let size = |d: &str| {
        read_json(&wd.join(d).join("coverage.json"))["avg_semantic_count"]
            .as_f64()
            .unwrap()
    };
    assert!(
        size("opt") <= size("even"),
        "optimized {} vs even {}",
        size("opt"),
        size("even")
    );

    let trace = fs::read_to_string(wd.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 5 + 25);
    ok(wd, &["verify", "trace.jsonl"]);
}

#[test]
fn worked_question_keeps_the_correct_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/star_is_born.jsonl");
    fs::copy(fixture, wd.join("star.jsonl")).unwrap();
    fs::write(
        wd.join("ragset.toml"),
        "alpha = 0.2\n\n[synthetic]\nk_passages = 4\nm_samples = 10\n",
    )
    .unwrap();
    ok(wd, &["simulate"]);
    ok(wd, &["calibrate"]);
    ok(
        wd,
        &[
            "predict",
            "--test",
            "star.jsonl",
            "--out",
            "star_sets.jsonl",
        ],
    );

    let text = fs::read_to_string(wd.join("star_sets.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let set: Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(set["question_id"], "star-is-born");
    let reps: Vec<&str> = set["clusters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["representative"].as_str().unwrap())
        .collect();
    assert!(reps.contains(&"James Mason"), "{reps:?}");
    assert!(set["source_passages"]
        .as_array()
        .unwrap()
        .contains(&Value::from("p-1954-film")));
    ok(wd, &["verify", "star_sets.jsonl"]);
}
