use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};

use proptest::prelude::*;

use super::*;
use crate::cgroup::{resolve_layout, v1_cpu_dir, v1_memory_dir};
use crate::clock::SimClock;
use crate::model::{names, JobIdentity, MetricKind, MetricValue, TagSet};

const SEC: u64 = 1_000_000_000;

fn write_v1(root: &Path, uid: u32, job: u64, rss: u64, cpu_ns: u64, pids: &[u32]) {
    let mem = root.join(v1_memory_dir(uid, job));
    let cpu = root.join(v1_cpu_dir(uid, job));
    fs::create_dir_all(&mem).unwrap();
    fs::create_dir_all(&cpu).unwrap();
    fs::write(mem.join("memory.stat"), format!("rss {rss}\ncache 100\ntotal_rss {rss}\ntotal_cache 100\n")).unwrap();
    fs::write(mem.join("memory.usage_in_bytes"), format!("{}\n", rss + 100)).unwrap();
    let procs: String = pids.iter().map(|p| format!("{p}\n")).collect();
    fs::write(mem.join("cgroup.procs"), procs).unwrap();
    fs::write(cpu.join("cpuacct.usage"), format!("{cpu_ns}\n")).unwrap();
}

fn cfg_for(root: &Path) -> AgentConfig {
    let mut cfg = AgentConfig::new(JobIdentity::new(1000, 42, None, "node01").unwrap());
    cfg.cgroup_root = root.join("cgroup");
    cfg.proc_root = root.join("proc");
    cfg.backoff_base = Duration::from_millis(1);
    cfg
}

#[test]
fn parse_reserved_and_custom_tags() {
    let env = [("SLURM_JOB_ID", "42"), ("UID", "1000"), ("HOSTNAME", "node07")];
    let cfg = parse_monitoring_args(&["--case-number", "7", "--step-name", "fem"], &env).unwrap();
    assert_eq!(cfg.tags.get("case_number"), Some("7"));
    assert_eq!(cfg.tags.get("step_name"), Some("fem"));
    assert_eq!(cfg.tags.len(), 2);
    assert_eq!(cfg.job, JobIdentity::new(1000, 42, None, "node07").unwrap());
    assert_eq!(cfg.sample_interval, Duration::from_secs(5));

    let cfg = parse_monitoring_args(&["--my-domain-tag", "x"], &env).unwrap();
    assert_eq!(cfg.tags.get("my_domain_tag"), Some("x"));
}

#[test]
fn parse_requires_job_identity() {
    let env: [(&str, &str); 0] = [];
    assert_eq!(
        parse_monitoring_args::<&str>(&[], &env).unwrap_err(),
        AgentConfigError::MissingJob
    );
    let cfg = parse_monitoring_args(&["--job-id", "9", "--uid", "5", "--hostname", "h"], &env).unwrap();
    assert_eq!(cfg.job.job_id, 9);
}

#[test]
fn parse_usage_errors() {
    let env = [("SLURM_JOB_ID", "42"), ("UID", "1"), ("HOSTNAME", "h")];
    assert!(matches!(
        parse_monitoring_args(&["--case-number"], &env),
        Err(AgentConfigError::Usage(_))
    ));
    assert!(matches!(parse_monitoring_args(&["stray"], &env), Err(AgentConfigError::Usage(_))));
    assert!(matches!(
        parse_monitoring_args(&["--interval", "0s"], &env),
        Err(AgentConfigError::InvalidValue { .. })
    ));
    assert!(matches!(
        parse_monitoring_args(&["--job-id", "x"], &env),
        Err(AgentConfigError::InvalidValue { .. })
    ));
}

#[test]
fn parse_env_and_options() {
    let tp = "00-0102030405060708090a0b0c0d0e0f10-0102030405060708-01";
    let env = [
        ("SLURM_JOB_ID", "42"),
        ("SLURM_ARRAY_TASK_ID", "3"),
        ("UID", "1000"),
        ("HOSTNAME", "n1"),
        ("SCITRACE_ENDPOINT", "http://collector:4318"),
        ("TRACEPARENT", tp),
    ];
    let cfg = parse_monitoring_args(
        &["--interval=250ms", "--cgroup-root", "/tmp/cg", "--pipeline-name", "stress_model"],
        &env,
    )
    .unwrap();
    assert_eq!(cfg.sample_interval, Duration::from_millis(250));
    assert_eq!(cfg.export_endpoint, "http://collector:4318");
    assert_eq!(cfg.job.array_task_id, Some(3));
    assert_eq!(cfg.cgroup_root, Path::new("/tmp/cg"));
    assert_eq!(cfg.trace_id.unwrap().to_hex(), "0102030405060708090a0b0c0d0e0f10");
    assert_eq!(cfg.tags.get("pipeline_name"), Some("stress_model"));
    let cfg = parse_monitoring_args(&["--endpoint", "http://x"], &env).unwrap();
    assert_eq!(cfg.export_endpoint, "http://x");
}

fn value(samples: &[crate::model::MetricSample], name: &str) -> Option<MetricValue> {
    samples.iter().find(|s| s.name == name).map(|s| s.value)
}

#[test]
fn first_sample_then_utilization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cfg_for(dir.path());
    write_v1(&cfg.cgroup_root, 1000, 42, 7_800_000_000, 0, &[12]);
    fs::create_dir_all(cfg.proc_root.join("12/fd")).unwrap();
    for i in 0..3 {
        fs::write(cfg.proc_root.join(format!("12/fd/{i}")), "").unwrap();
    }
    let layout = resolve_layout(&cfg.cgroup_root, 1000, 42).unwrap();
    let clock = SimClock::new(1_000 * SEC);
    let first = sample_once(&cfg, &layout, None, 0, &clock).unwrap();
    assert_eq!(first.samples.len(), 6);
    assert!(value(&first.samples, names::CPU_UTILIZATION).is_none());
    assert_eq!(value(&first.samples, names::MEMORY_RSS), Some(MetricValue::Int(7_800_000_000)));
    assert_eq!(value(&first.samples, names::OPEN_FILES), Some(MetricValue::Int(3)));
    assert_eq!(value(&first.samples, names::PIDS), Some(MetricValue::Int(1)));
    let rss = first.samples.iter().find(|s| s.name == names::MEMORY_RSS).unwrap();
    assert_eq!((rss.unit.as_str(), rss.kind), ("By", MetricKind::Gauge));

    write_v1(&cfg.cgroup_root, 1000, 42, 7_800_000_000, 20 * SEC, &[12]);
    clock.advance(5 * SEC);
    let second = sample_once(&cfg, &layout, Some(&first.snapshot), 0, &clock).unwrap();
    assert_eq!(second.samples.len(), 7);
    assert_eq!(value(&second.samples, names::CPU_UTILIZATION), Some(MetricValue::Double(4.0)));
}

#[test]
fn cpu_regression_rebases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cfg_for(dir.path());
    let clock = SimClock::new(SEC);
    let mut sampler = Sampler::new(cfg.clone());
    let mut cpu_stream = Vec::new();
    for (i, raw) in [10 * SEC, 30 * SEC, 5 * SEC, 9 * SEC].into_iter().enumerate() {
        write_v1(&cfg.cgroup_root, 1000, 42, 1, raw, &[]);
        let SampleOutcome::Sampled { samples, warning } = sampler.sample(&clock) else { panic!() };
        assert_eq!(warning.is_some(), i == 2);
        assert_eq!(value(&samples, names::CPU_UTILIZATION).is_some(), i == 1 || i == 3);
        cpu_stream.push(value(&samples, names::CPU_TIME).unwrap().as_f64());
        clock.advance(5 * SEC);
    }
    assert!(cpu_stream.windows(2).all(|w| w[0] <= w[1]), "{cpu_stream:?}");
    assert_eq!(cpu_stream, [10e9, 30e9, 35e9, 39e9]);
}

#[test]
fn sampler_reports_job_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cfg_for(dir.path());
    let clock = SimClock::new(SEC);
    let mut agent = Agent::new(cfg.clone());
    assert_eq!(agent.tick(&clock), Tick::Skipped);
    write_v1(&cfg.cgroup_root, 1000, 42, 1, 1, &[]);
    assert_eq!(agent.tick(&clock), Tick::Sampled(6));
    fs::remove_dir_all(cfg.cgroup_root.join(v1_memory_dir(1000, 42))).unwrap();
    assert_eq!(agent.tick(&clock), Tick::JobEnded);
    assert_eq!(agent.summary().stop_reason, StopReason::JobEnded);
}

/// Fails the first `failures` posts, then answers `status`.
struct ScriptedTransport {
    failures: u32,
    status: u16,
    calls: AtomicU32,
    bodies: Mutex<Vec<Vec<u8>>>,
}

impl ScriptedTransport {
    fn new(failures: u32, status: u16) -> Self {
        Self {
            failures,
            status,
            calls: AtomicU32::new(0),
            bodies: Mutex::new(Vec::new()),
        }
    }
}

impl Transport for ScriptedTransport {
    fn post(&self, _path: &str, body: &[u8]) -> PostResult {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.failures {
            return Err("connection refused".into());
        }
        self.bodies.lock().unwrap().push(body.to_vec());
        Ok(self.status)
    }
}

fn one_sample_batch() -> ExportBatch {
    let cfg = AgentConfig::new(JobIdentity::new(1, 2, None, "h").unwrap());
    let snap = crate::model::CgroupSnapshot {
        taken_unix_nano: 5,
        ..Default::default()
    };
    ExportBatch::Metrics(derive_samples(&cfg, &snap, 0, None))
}

#[test]
fn export_retry_policy() {
    let policy = RetryPolicy::new(5, Duration::from_millis(1));
    let no_sleep = |_: Duration| {};
    let ok = ScriptedTransport::new(0, 200);
    assert_eq!(export_batch(&one_sample_batch(), &ok, &policy, &no_sleep).attempts(), 1);

    let flaky = ScriptedTransport::new(2, 200);
    let r = export_batch(&one_sample_batch(), &flaky, &policy, &no_sleep);
    assert!(r.is_accepted());
    assert_eq!(r.attempts(), 3);

    let bad = ScriptedTransport::new(0, 400);
    assert_eq!(
        export_batch(&one_sample_batch(), &bad, &policy, &no_sleep),
        ExportResult::Rejected { status: 400, attempts: 1 }
    );

    let down = ScriptedTransport::new(u32::MAX, 200);
    let r = export_batch(&one_sample_batch(), &down, &policy, &no_sleep);
    let ExportResult::RetriesExhausted { attempts, delays, .. } = r else { panic!() };
    assert_eq!(attempts, 6);
    for (k, d) in delays.iter().enumerate() {
        let nominal = 0.001 * 2f64.powi(k as i32);
        let s = d.as_secs_f64();
        assert!(s >= nominal * 0.8 - 1e-12 && s <= nominal * 1.2 + 1e-12, "retry {k}: {s}");
    }

    let unavailable = ScriptedTransport::new(0, 503);
    let r = export_batch(&one_sample_batch(), &unavailable, &RetryPolicy::new(2, Duration::ZERO), &no_sleep);
    assert!(matches!(r, ExportResult::RetriesExhausted { attempts: 3, .. }));
}

/// Advances simulated time and removes the job's cgroup once `end` is reached.
struct EndingPacer {
    clock: SimClock,
    end: u64,
    cgroup_dir: std::path::PathBuf,
}

impl Pacer for EndingPacer {
    fn wait(&self, interval: Duration, stop: &StopSignal) -> bool {
        let now = self.clock.advance(interval.as_nanos() as u64);
        if now >= self.end && self.cgroup_dir.exists() {
            fs::remove_dir_all(&self.cgroup_dir).unwrap();
        }
        stop.is_stopped()
    }
}

#[test]
fn thirty_second_job_five_second_interval() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cfg_for(dir.path());
    cfg.batch_max_samples = 10;
    write_v1(&cfg.cgroup_root, 1000, 42, 1, 1, &[]);
    let clock = SimClock::new(100 * SEC);
    let pacer = EndingPacer {
        clock: clock.clone(),
        end: 130 * SEC,
        cgroup_dir: cfg.cgroup_root.join(v1_memory_dir(1000, 42)),
    };
    let transport = Arc::new(ScriptedTransport::new(0, 200));
    let summary = run_monitoring(cfg, &StopSignal::new(), &clock, &pacer, transport.clone());
    assert!((5..=7).contains(&summary.rounds), "{}", summary.rounds);
    assert_eq!(summary.stop_reason, StopReason::JobEnded);
    assert_eq!(summary.batches_dropped, 0);
    let posted: usize = transport
        .bodies
        .lock()
        .unwrap()
        .iter()
        .map(|b| {
            let v: serde_json::Value = serde_json::from_slice(b).unwrap();
            v["metrics"]
                .as_array()
                .unwrap()
                .iter()
                .map(|m| m["points"].as_array().unwrap().len())
                .sum::<usize>()
        })
        .sum();
    assert_eq!(posted as u64, summary.samples);
}

#[test]
fn collector_down_for_whole_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cfg_for(dir.path());
    cfg.batch_max_samples = 6;
    cfg.max_retry = 2;
    write_v1(&cfg.cgroup_root, 1000, 42, 1, 1, &[]);
    let clock = SimClock::new(100 * SEC);
    let pacer = EndingPacer {
        clock: clock.clone(),
        end: 120 * SEC,
        cgroup_dir: cfg.cgroup_root.join(v1_memory_dir(1000, 42)),
    };
    let transport = Arc::new(HttpTransport::new("http://127.0.0.1:9", Duration::from_millis(200)));
    let summary = run_monitoring(cfg, &StopSignal::new(), &clock, &pacer, transport);
    assert_eq!(summary.exit_code(), 0);
    assert_eq!(summary.batches_exported, 0);
    assert!(summary.batches_dropped >= 1);
    assert_eq!(summary.records_dropped, summary.samples);
}

#[test]
fn stop_signal_from_another_thread() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cfg_for(dir.path());
    cfg.sample_interval = Duration::from_millis(10);
    write_v1(&cfg.cgroup_root, 1000, 42, 1, 1, &[]);
    let stop = StopSignal::new();
    let s2 = stop.clone();
    let t = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(60));
        s2.stop();
    });
    let transport = Arc::new(ScriptedTransport::new(0, 200));
    let summary = run_monitoring(cfg, &stop, &crate::clock::SystemClock, &RealTimePacer, transport);
    t.join().unwrap();
    assert_eq!(summary.stop_reason, StopReason::Signal);
    assert!(summary.rounds >= 1);
    assert_eq!(summary.batches_exported, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exported_samples_carry_exactly_cfg_tags(
        tags in proptest::collection::btree_map("[a-z][a-z0-9_]{0,8}", "[ -~]{1,12}", 0..6)
    ) {
        let mut set = TagSet::default();
        for (k, v) in &tags {
            set.insert(k, v.clone()).unwrap();
        }
        let mut cfg = AgentConfig::new(JobIdentity::new(1, 2, None, "h").unwrap());
        cfg.tags = set;
        let snap = crate::model::CgroupSnapshot { taken_unix_nano: 9, ..Default::default() };
        let samples = derive_samples(&cfg, &snap, 0, Some(1.0));
        let batch = ExportBatch::Metrics(samples);
        for doc in batch.documents() {
            let v: serde_json::Value = serde_json::from_slice(&doc).unwrap();
            let attrs = v["resource"]["attributes"].as_object().unwrap();
            let custom: HashMap<&str, &str> = attrs
                .iter()
                .filter(|(k, _)| !["host.name", "job.uid", "job.id", "job.array_task_id"].contains(&k.as_str()))
                .map(|(k, v)| (k.as_str(), v.as_str().unwrap()))
                .collect();
            let want: HashMap<&str, &str> = tags.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
            prop_assert_eq!(custom, want);
        }
    }
}
