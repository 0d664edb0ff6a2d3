use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use scitrace::model::{JobIdentity, MetricKind, MetricSample, MetricValue, TagSet};
use scitrace::sim::{generate_fixture_tree, ScenarioSpec};
use scitrace::store::{Store, StoredRecord};
use scitrace_ffi::*;

fn last_error() -> String {
    let p = scitrace_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn format(ctx: &ScitraceTraceContext) -> String {
    let mut buf = [0 as c_char; SCITRACE_TRACEPARENT_BUFFER_LEN];
    let rc = unsafe { scitrace_traceparent_format(ctx, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(rc, ScitraceStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_owned()
}

#[test]
fn traceparent_round_trip() {
    let text = CString::new("00-4bf92f3577b34da6a3ce929d0e0e4736-00f067aa0ba902b7-01").unwrap();
    let mut ctx = ScitraceTraceContext::default();
    assert_eq!(unsafe { scitrace_traceparent_parse(text.as_ptr(), &mut ctx) }, ScitraceStatus::Ok);
    assert_eq!(ctx.flags, 1);
    assert_eq!(ctx.span_id, [0x00, 0xf0, 0x67, 0xaa, 0x0b, 0xa9, 0x02, 0xb7]);
    assert_eq!(format(&ctx), text.to_str().unwrap());
}

#[test]
fn malformed_traceparent_sets_error() {
    let text = CString::new("00-00000000000000000000000000000000-00f067aa0ba902b7-01").unwrap();
    let mut ctx = ScitraceTraceContext::default();
    let rc = unsafe { scitrace_traceparent_parse(text.as_ptr(), &mut ctx) };
    assert_eq!(rc, ScitraceStatus::ParseError);
    assert!(!last_error().is_empty());
    assert_eq!(ctx, ScitraceTraceContext::default());
}

#[test]
fn null_arguments_are_rejected() {
    let mut ctx = ScitraceTraceContext::default();
    assert_eq!(unsafe { scitrace_traceparent_parse(ptr::null(), &mut ctx) }, ScitraceStatus::NullArgument);
    assert!(last_error().contains("value"));
    assert_eq!(unsafe { scitrace_new_trace(1, ptr::null_mut()) }, ScitraceStatus::NullArgument);
    let mut store = ptr::null_mut();
    assert_eq!(unsafe { scitrace_store_open(ptr::null(), &mut store) }, ScitraceStatus::NullArgument);
    assert!(store.is_null());
    unsafe {
        scitrace_store_close(ptr::null_mut());
        scitrace_string_free(ptr::null_mut());
    }
}

#[test]
fn zero_context_cannot_be_formatted() {
    let ctx = ScitraceTraceContext::default();
    let mut buf = [0 as c_char; SCITRACE_TRACEPARENT_BUFFER_LEN];
    let rc = unsafe { scitrace_traceparent_format(&ctx, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(rc, ScitraceStatus::InvalidArgument);
}

#[test]
fn short_buffer_is_reported() {
    let mut ctx = ScitraceTraceContext::default();
    unsafe { scitrace_new_trace(3, &mut ctx) };
    let mut buf = [0 as c_char; 10];
    let rc = unsafe { scitrace_traceparent_format(&ctx, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(rc, ScitraceStatus::BufferTooSmall);
    assert!(last_error().contains("56"));
}

#[test]
fn child_keeps_trace_and_changes_span() {
    let (mut root, mut again, mut child) = Default::default();
    unsafe {
        assert_eq!(scitrace_new_trace(42, &mut root), ScitraceStatus::Ok);
        scitrace_new_trace(42, &mut again);
        assert_eq!(scitrace_child_context(&root, 7, &mut child), ScitraceStatus::Ok);
    }
    let (root, again, child): (ScitraceTraceContext, ScitraceTraceContext, ScitraceTraceContext) = (root, again, child);
    assert_eq!(root, again);
    assert_eq!(child.trace_id, root.trace_id);
    assert_ne!(child.span_id, root.span_id);
    assert_eq!(child.flags, root.flags);
}

#[test]
fn tag_key_normalization() {
    let raw = CString::new("--Case-Number").unwrap();
    let mut buf = [0 as c_char; 64];
    let rc = unsafe { scitrace_normalize_tag_key(raw.as_ptr(), buf.as_mut_ptr(), buf.len()) };
    assert_eq!(rc, ScitraceStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "case_number");

    let bad = CString::new("--").unwrap();
    let rc = unsafe { scitrace_normalize_tag_key(bad.as_ptr(), buf.as_mut_ptr(), buf.len()) };
    assert_eq!(rc, ScitraceStatus::InvalidArgument);
}

#[test]
fn cgroup_snapshot_reads_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ScenarioSpec::new(2, 2, 5);
    spec.memory_plateau_dist = (3e9, 3e9);
    spec.duration_dist = (10.0, 10.0);
    let t = spec.start_unix_nano + 5 * spec.interval_nanos();
    let ledger = generate_fixture_tree(&spec, dir.path(), t).unwrap();
    let job = &ledger.jobs[0];
    let expected = job.samples.iter().find(|s| s.time_unix_nano == t).unwrap();

    let cg = CString::new(dir.path().join("cgroup").to_str().unwrap()).unwrap();
    let proc_root = CString::new(dir.path().join("proc").to_str().unwrap()).unwrap();
    let mut snap = ScitraceCgroupSnapshot::default();
    let rc = unsafe { scitrace_cgroup_snapshot(cg.as_ptr(), proc_root.as_ptr(), 1000, job.job.job_id, &mut snap) };
    assert_eq!(rc, ScitraceStatus::Ok, "{}", last_error());
    assert_eq!(snap.rss_bytes, expected.rss_bytes);
    assert_eq!(snap.cache_bytes, expected.cache_bytes);
    assert_eq!(snap.cpu_usage_ns_cumulative, expected.cpu_ns);
    assert_eq!(snap.pid_count, expected.pids);
    assert_eq!(snap.open_files, expected.open_files);

    let rc = unsafe { scitrace_cgroup_snapshot(cg.as_ptr(), proc_root.as_ptr(), 1000, 999, &mut snap) };
    assert_eq!(rc, ScitraceStatus::NotFound);
}

#[test]
fn cgroup_parse_error_is_classified() {
    let dir = tempfile::tempdir().unwrap();
    let job_dir = dir.path().join(scitrace::cgroup::v1_memory_dir(1000, 17));
    std::fs::create_dir_all(&job_dir).unwrap();
    std::fs::write(job_dir.join("memory.stat"), "total_rss banana\n").unwrap();
    std::fs::write(job_dir.join("memory.usage_in_bytes"), "1\n").unwrap();
    std::fs::create_dir_all(dir.path().join(scitrace::cgroup::v1_cpu_dir(1000, 17))).unwrap();
    let cg = CString::new(dir.path().to_str().unwrap()).unwrap();
    let proc_root = CString::new(dir.path().join("proc").to_str().unwrap()).unwrap();
    let mut snap = ScitraceCgroupSnapshot::default();
    let rc = unsafe { scitrace_cgroup_snapshot(cg.as_ptr(), proc_root.as_ptr(), 1000, 17, &mut snap) };
    assert_eq!(rc, ScitraceStatus::ParseError, "{}", last_error());
}

fn seed_store(dir: &Path) {
    let store = Store::open(dir).unwrap();
    let job = JobIdentity::new(1000, 5, None, "node01").unwrap();
    let records: Vec<StoredRecord> = (0..4u64)
        .map(|i| {
            StoredRecord::metric(
                MetricSample {
                    name: "job.memory.rss".into(),
                    unit: "By".into(),
                    time_unix_nano: 1_000 + i * 100,
                    value: MetricValue::Int(10 * i as i64),
                    kind: MetricKind::Gauge,
                    job: job.clone(),
                    tags: TagSet::default(),
                    trace_id: None,
                },
                1_000 + i * 100,
            )
        })
        .collect();
    assert_eq!(store.append(&records).unwrap(), 4);
}

#[test]
fn store_handle_queries_csv() {
    let dir = tempfile::tempdir().unwrap();
    seed_store(dir.path());
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let signal = CString::new("metrics").unwrap();
    let mut store = ptr::null_mut();
    unsafe {
        assert_eq!(scitrace_store_open(path.as_ptr(), &mut store), ScitraceStatus::Ok);
        let mut count = 0u64;
        assert_eq!(scitrace_store_record_count(store, signal.as_ptr(), &mut count), ScitraceStatus::Ok);
        assert_eq!(count, 4);

        let mut csv: *mut c_char = ptr::null_mut();
        assert_eq!(scitrace_store_query_csv(store, signal.as_ptr(), 1_100, 1_300, &mut csv), ScitraceStatus::Ok);
        let text = CStr::from_ptr(csv).to_str().unwrap().to_owned();
        scitrace_string_free(csv);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3, "{text}");
        assert!(lines[0].contains("time_unix_nano"));

        let bad = CString::new("logs").unwrap();
        assert_eq!(scitrace_store_query_csv(store, bad.as_ptr(), 0, 1, &mut csv), ScitraceStatus::InvalidArgument);
        assert_eq!(scitrace_store_query_csv(store, signal.as_ptr(), 5, 1, &mut csv), ScitraceStatus::InvalidArgument);
        scitrace_store_close(store);
    }
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

/// Compiles and runs a C program against the generated header and static library.
#[test]
fn c_program_links_against_header() {
    let lib = target_dir().join("libscitrace_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "scitrace.h"

int main(void) {
    const char *tp = "00-4bf92f3577b34da6a3ce929d0e0e4736-00f067aa0ba902b7-01";
    ScitraceTraceContext ctx, child;
    char buf[SCITRACE_TRACEPARENT_BUFFER_LEN];
    if (scitrace_traceparent_parse(tp, &ctx) != SCITRACE_STATUS_OK) return 1;
    if (scitrace_traceparent_format(&ctx, buf, sizeof buf) != SCITRACE_STATUS_OK) return 2;
    if (strcmp(buf, tp) != 0) return 3;
    if (scitrace_child_context(&ctx, 9, &child) != SCITRACE_STATUS_OK) return 4;
    if (memcmp(child.trace_id, ctx.trace_id, 16) != 0) return 5;
    if (scitrace_traceparent_parse("garbage", &ctx) != SCITRACE_STATUS_PARSE_ERROR) return 6;
    if (scitrace_last_error() == NULL) return 7;
    puts(buf);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "00-4bf92f3577b34da6a3ce929d0e0e4736-00f067aa0ba902b7-01"
    );
}
