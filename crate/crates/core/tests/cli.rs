use std::path::Path;
use std::process::{Command, Output};

use scitrace::sim::ScenarioSpec;
use scitrace::trace::parse_traceparent;

fn scitrace(state: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scitrace"));
    cmd.env("SCITRACE_STATE_DIR", state)
        .env_remove("TRACEPARENT")
        .env_remove("SCITRACE_ENDPOINT");
    cmd
}

fn stdout_value(out: &Output, key: &str) -> String {
    let text = String::from_utf8_lossy(&out.stdout);
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .to_owned()
}

#[test]
fn span_start_propagates_through_env() {
    let dir = tempfile::tempdir().unwrap();
    let root = scitrace(dir.path())
        .args(["span", "start", "--name", "pipeline", "--kind", "pipeline"])
        .output()
        .unwrap();
    assert!(root.status.success(), "{}", String::from_utf8_lossy(&root.stderr));
    let root_tp = stdout_value(&root, "TRACEPARENT");
    let root_ctx = parse_traceparent(&root_tp).unwrap();

    let child = scitrace(dir.path())
        .env("TRACEPARENT", &root_tp)
        .args(["span", "start", "--name", "job-1", "--kind", "job", "--attr", "case=7"])
        .output()
        .unwrap();
    assert!(child.status.success());
    let child_ctx = parse_traceparent(&stdout_value(&child, "TRACEPARENT")).unwrap();
    assert_eq!(child_ctx.trace_id(), root_ctx.trace_id());
    assert_ne!(child_ctx.span_id(), root_ctx.span_id());

    let handle = stdout_value(&child, "SCITRACE_SPAN_HANDLE");
    let end = scitrace(dir.path())
        .args(["span", "end", "--handle", &handle, "--endpoint", "http://127.0.0.1:9"])
        .output()
        .unwrap();
    assert!(end.status.success(), "unreachable collector must not fail the job");
}

#[test]
fn malformed_traceparent_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = scitrace(dir.path())
        .env("TRACEPARENT", "00-nothex-00f067aa0ba902b7-01")
        .args(["span", "start", "--name", "x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn sim_run_then_analyze_store() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ScenarioSpec::new(8, 3, 4);
    spec.duration_dist = (6.0, 10.0);
    spec.memory_plateau_dist = (1e9, 3e9);
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let report_path = dir.path().join("report.json");
    let work = dir.path().join("work");
    let out = scitrace(dir.path())
        .arg("sim")
        .arg("run")
        .arg("--spec")
        .arg(&spec_path)
        .arg("--out")
        .arg(&report_path)
        .arg("--work-dir")
        .arg(&work)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "pass");
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(doc["verdict"]["passed"], true);
    let store = doc["report"]["store_dir"].as_str().unwrap().to_owned();

    let svg = dir.path().join("max.svg");
    let csv = dir.path().join("max.csv");
    let out = scitrace(dir.path())
        .args(["analyze", "max-dist", "--store", &store, "--metric", "job.memory.rss", "--bins", "4"])
        .arg("--svg")
        .arg(&svg)
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let chart = std::fs::read_to_string(&svg).unwrap();
    assert!(chart.starts_with("<svg") && chart.contains("histogram"));
    let table = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().count(), 5);

    let out = scitrace(dir.path())
        .args(["analyze", "active-jobs", "--store", &store, "--bucket", "1s"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let max_active = String::from_utf8_lossy(&out.stdout)
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    assert_eq!(max_active, 3.0);

    let out = scitrace(dir.path())
        .args(["analyze", "grid", "--store", &store, "--metric", "job.memory.rss", "--ids", "1,2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown job ids");
}
