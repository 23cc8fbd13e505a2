use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fastslow_core::world::REFERENCE_GRID_JSON;
use fastslow_core::ExperienceStore;
use serde_json::Value;
use tempfile::TempDir;

fn fastslow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastslow"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("ref.json"), REFERENCE_GRID_JSON).unwrap();
    dir
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_error(out: &Output, code: i32, needle: &str) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", stderr(out));
    let err = stderr(out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains(needle), "expected `{needle}` in {err}");
}

const RUN: &[&str] = &[
    "run",
    "--task",
    "ref.json",
    "--mode",
    "per-decision",
    "--episodes",
    "100",
    "--seed",
    "7",
    "--budget-s",
    "1.0",
    "--trace",
    "t.jsonl",
    "--summary",
    "s.csv",
    "--store",
    "m.json",
];

#[test]
fn run_writes_all_artifacts() {
    let dir = workspace();
    let out = fastslow(dir.path(), RUN);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out.stderr.is_empty());
    let trace = fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let summary = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert!(!trace.is_empty());
    assert_eq!(summary.lines().count(), 101);
    assert!(summary.starts_with(
        "episode,return,steps,reached_goal,n_s1_budget,n_s1_mc1,n_s1_mc2,n_s2,wall_time_s\n"
    ));
    ExperienceStore::load(dir.path().join("m.json")).unwrap();
}

#[test]
fn fresh_runs_are_byte_identical() {
    let (a, b) = (workspace(), workspace());
    for dir in [&a, &b] {
        assert!(fastslow(dir.path(), RUN).status.success());
    }
    for f in ["t.jsonl", "s.csv", "m.json"] {
        let read = |d: &TempDir| fs::read(d.path().join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f} differs");
    }
}

#[test]
fn store_accumulates_across_invocations() {
    let dir = workspace();
    let args = [
        "run",
        "--task",
        "ref.json",
        "--episodes",
        "5",
        "--store",
        "m.json",
    ];
    assert!(fastslow(dir.path(), &args).status.success());
    let first = ExperienceStore::load(dir.path().join("m.json")).unwrap();
    assert!(fastslow(dir.path(), &args).status.success());
    let second = ExperienceStore::load(dir.path().join("m.json")).unwrap();
    let episodes = |s: &ExperienceStore| s.task_stats()["reference-4x4"].count;
    assert_eq!((episodes(&first), episodes(&second)), (5, 10));
}

#[test]
fn input_errors_exit_1_and_validation_errors_exit_2() {
    let dir = workspace();
    assert_error(
        &fastslow(dir.path(), &["run", "--task", "missing.json"]),
        1,
        "missing.json",
    );
    assert_error(&fastslow(dir.path(), &["run"]), 1, "task");
    assert_error(
        &fastslow(
            dir.path(),
            &["run", "--task", "ref.json", "--episodes", "0"],
        ),
        1,
        "episodes",
    );
    assert_error(
        &fastslow(dir.path(), &["run", "--task", "ref.json", "--alpha", "abc"]),
        1,
        "--alpha",
    );

    let walled = REFERENCE_GRID_JSON.replace("\"walls\": [[1, 1]]", "\"walls\": [[2, 3], [3, 2]]");
    assert_ne!(walled, REFERENCE_GRID_JSON);
    fs::write(dir.path().join("walled.json"), walled).unwrap();
    assert_error(
        &fastslow(dir.path(), &["run", "--task", "walled.json"]),
        2,
        "goal",
    );
}

#[test]
fn baseline_pure_s2_is_optimal() {
    let dir = workspace();
    let out = fastslow(
        dir.path(),
        &[
            "baseline",
            "--task",
            "ref.json",
            "--mode",
            "pure-s2",
            "--episodes",
            "1",
            "--summary",
            "b.csv",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_eq!(summary.lines().nth(1), Some("0,4,6,true,0,0,0,6,3"));
}

#[test]
fn baseline_pure_s1_is_deterministic() {
    let (a, b) = (workspace(), workspace());
    let args = [
        "baseline",
        "--task",
        "ref.json",
        "--mode",
        "pure-s1",
        "--episodes",
        "30",
        "--seed",
        "3",
        "--summary",
        "b.csv",
    ];
    for dir in [&a, &b] {
        assert!(fastslow(dir.path(), &args).status.success());
    }
    let read = |d: &TempDir| fs::read(d.path().join("b.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn baseline_rejects_bad_modes() {
    let dir = workspace();
    assert_error(
        &fastslow(
            dir.path(),
            &["baseline", "--task", "ref.json", "--mode", "pure-s9"],
        ),
        1,
        "pure-s9",
    );
    assert_error(
        &fastslow(
            dir.path(),
            &["baseline", "--task", "ref.json", "--mode", "per-decision"],
        ),
        1,
        "mode",
    );
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = workspace();
    fs::write(
        dir.path().join("c.json"),
        r#"{"task": "ref.json", "mode": "pure-s2", "episodes": 4, "summary": "c.csv"}"#,
    )
    .unwrap();
    let out = fastslow(
        dir.path(),
        &["run", "--config", "c.json", "--episodes", "2"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);

    fs::write(dir.path().join("bad.json"), r#"{"tau": 1}"#).unwrap();
    assert_error(
        &fastslow(dir.path(), &["run", "--config", "bad.json"]),
        1,
        "tau",
    );
}

fn inspect(dir: &Path, store: &str) -> Value {
    let out = fastslow(dir, &["inspect", "--store", store]);
    assert!(out.status.success(), "{}", stderr(&out));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn inspect_fresh_store_reports_zeros() {
    let dir = workspace();
    ExperienceStore::default()
        .save(dir.path().join("fresh.json"))
        .unwrap();
    let doc = inspect(dir.path(), "fresh.json");
    assert_eq!(doc["q_entries"], 0);
    assert_eq!(doc["q_visits"], 0);
    assert_eq!(doc["mc_costs"]["mc1_s"]["count"], 0);
    assert_eq!(doc["mc_costs"]["mc2_s"]["count"], 0);
    assert_eq!(doc["solvers"].as_array().unwrap().len(), 0);
}

#[test]
fn inspect_counts_match_trace() {
    let dir = workspace();
    assert!(fastslow(dir.path(), RUN).status.success());
    let doc = inspect(dir.path(), "m.json");
    let trace = fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let records: Vec<Value> = trace
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let n = records.len() as u64;
    let s2 = records.iter().filter(|r| r["source"] == "S2").count() as u64;
    let mc2 = records.iter().filter(|r| !r["v1"].is_null()).count() as u64;
    assert_eq!(doc["q_visits"], n);
    assert_eq!(doc["mc_costs"]["mc1_s"]["count"], n);
    assert_eq!(doc["mc_costs"]["mc2_s"]["count"], mc2);
    let solvers = doc["solvers"].as_array().unwrap();
    let by = |id: &str| solvers.iter().find(|s| s["solver"] == id).unwrap().clone();
    assert_eq!(by("s2")["runtime_s"]["count"], s2);
    assert_eq!(by("s2")["return_to_go"]["count"], s2);
    assert_eq!(by("s1")["return_to_go"]["count"], n - s2);
    assert_eq!(doc["task_returns"]["reference-4x4"]["count"], 100);
}

#[test]
fn inspect_rejects_missing_and_corrupt_stores() {
    let dir = workspace();
    assert_error(
        &fastslow(dir.path(), &["inspect", "--store", "none.json"]),
        1,
        "none.json",
    );
    assert!(fastslow(dir.path(), RUN).status.success());
    let text = fs::read_to_string(dir.path().join("m.json")).unwrap();
    let corrupt = text.replacen("\"action\": \"Down\"", "\"action\": \"Sideways\"", 1);
    assert_ne!(corrupt, text);
    fs::write(dir.path().join("bad.json"), corrupt).unwrap();
    assert_error(
        &fastslow(dir.path(), &["inspect", "--store", "bad.json"]),
        1,
        "q_table[",
    );
}

fn csv_rows(path: PathBuf) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect()
}

#[test]
fn export_blocks() {
    let dir = workspace();
    assert!(fastslow(dir.path(), RUN).status.success());
    let out = fastslow(
        dir.path(),
        &[
            "export", "--trace", "t.jsonl", "--block", "10", "--out", "b.csv",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = csv_rows(dir.path().join("b.csv"));
    assert_eq!(rows.len(), 11);
    assert_eq!(
        rows[0],
        "block,first_episode,last_episode,episodes,mean_return,s2_fraction"
    );
    assert!(rows[10].starts_with("9,90,99,10,"));

    // Block means recomputed from the summary file.
    let summary = csv_rows(dir.path().join("s.csv"));
    let returns: Vec<f64> = summary[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    for (i, row) in rows[1..].iter().enumerate() {
        let mean: f64 = returns[i * 10..i * 10 + 10].iter().sum::<f64>() / 10.0;
        let got: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!((got - mean).abs() < 1e-12, "block {i}: {got} vs {mean}");
    }
}

#[test]
fn export_empty_and_truncated_traces() {
    let dir = workspace();
    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let out = fastslow(dir.path(), &["export", "--trace", "empty.jsonl"]);
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "block,first_episode,last_episode,episodes,mean_return,s2_fraction\n"
    );

    assert!(fastslow(dir.path(), RUN).status.success());
    let trace = fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let mut lines: Vec<&str> = trace.lines().take(3).collect();
    let cut = &lines[2][..20];
    lines[2] = cut;
    fs::write(dir.path().join("cut.jsonl"), lines.join("\n")).unwrap();
    assert_error(
        &fastslow(dir.path(), &["export", "--trace", "cut.jsonl"]),
        1,
        "line 3",
    );
}
