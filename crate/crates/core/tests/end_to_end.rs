use std::sync::{Arc, Mutex};
use std::time::Duration;

use scitrace::agent::{run_monitoring, AgentConfig, HttpTransport, Pacer, StopReason, StopSignal};
use scitrace::clock::SimClock;
use scitrace::collector::{CollectorServer, PipelineConfig, QueryClient};
use scitrace::model::MetricRegistry;
use scitrace::sim::{plan, FixtureWriter, GroundTruthLedger, ScenarioSpec, RSS_METRIC};
use scitrace::store::{QueryRequest, ResultTable, Signal};

/// Advances simulated time one interval per wait and rewrites the job's
/// cgroup files from the ledger, removing them once the job has ended.
struct FixturePacer {
    clock: SimClock,
    writer: FixtureWriter,
    ledger: GroundTruthLedger,
    step: Mutex<usize>,
}

impl Pacer for FixturePacer {
    fn wait(&self, interval: Duration, _stop: &StopSignal) -> bool {
        let mut step = self.step.lock().unwrap();
        *step += 1;
        self.clock.advance(interval.as_nanos() as u64);
        let job = &self.ledger.jobs[0];
        match job.samples.get(*step) {
            Some(s) => self.writer.write_sample(job, s).unwrap(),
            None => self.writer.remove_job(job).unwrap(),
        }
        false
    }
}

fn get(url: &str, accept: &str) -> (u16, String) {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = agent.get(url).header("accept", accept).call().unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

#[test]
fn agent_export_is_queryable_as_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ScenarioSpec::new(1, 1, 17);
    spec.duration_dist = (12.0, 12.0);
    spec.memory_plateau_dist = (2e9, 2e9);
    let ledger = plan(&spec).unwrap();
    let job = ledger.jobs[0].clone();

    let clock = SimClock::new(job.samples[0].time_unix_nano);
    let mut cfg = PipelineConfig::new(dir.path().join("store"));
    cfg.listen_address = "127.0.0.1:0".into();
    let server = CollectorServer::start(&cfg, Arc::new(clock.clone())).unwrap();

    let writer = FixtureWriter::new(&dir.path().join("fs"), spec.cgroup_version);
    writer.write_sample(&job, &job.samples[0]).unwrap();
    let mut agent_cfg = AgentConfig::new(job.job.clone());
    agent_cfg.sample_interval = spec.sample_interval;
    agent_cfg.batch_max_samples = 40;
    agent_cfg.export_endpoint = server.endpoint();
    agent_cfg.cgroup_root = writer.cgroup_root.clone();
    agent_cfg.proc_root = writer.proc_root.clone();
    agent_cfg.tags.insert("case_number", "42").unwrap();
    let pacer = FixturePacer {
        clock: clock.clone(),
        writer,
        ledger: ledger.clone(),
        step: Mutex::new(0),
    };
    let transport = Arc::new(HttpTransport::new(&server.endpoint(), Duration::from_secs(5)));
    let summary = run_monitoring(agent_cfg, &StopSignal::new(), &clock, &pacer, transport);
    assert_eq!(summary.stop_reason, StopReason::JobEnded);
    assert_eq!(summary.exit_code(), 0);
    assert_eq!(summary.batches_dropped, 0, "{:#?}", summary.warnings);
    assert_eq!(summary.sampled_rounds, job.ticks);
    server.collector().flush();

    let base = server.endpoint();
    let url = format!("{base}/v1/query?signal=metrics&name={RSS_METRIC}&attr.case_number=42");
    let (status, body) = get(&url, "application/json");
    assert_eq!(status, 200, "{body}");
    let json: ResultTable = serde_json::from_str(&body).unwrap();
    let rows = json.metric_rows().unwrap();
    assert_eq!(rows.len(), job.samples.len());
    for (row, s) in rows.iter().zip(&job.samples) {
        assert_eq!(row.time_unix_nano, s.time_unix_nano);
        assert_eq!(row.value, s.rss_bytes as f64);
        assert_eq!(row.job.job_id, job.job.job_id);
    }
    assert!(json.column_index("case_number").is_some());

    let client = QueryClient::new(&base, Duration::from_secs(5));
    let req = QueryRequest::new(Signal::Metrics, 0, u64::MAX)
        .with_names([RSS_METRIC])
        .with_attr("case_number", "42");
    let csv = client.query(&req).unwrap();
    assert_eq!(csv.metric_rows().unwrap(), rows);
    assert_eq!(csv.columns, json.columns);

    let (status, text) = get(&url, "text/csv");
    assert_eq!(status, 200);
    assert_eq!(text.lines().count(), rows.len() + 1);

    let none = client
        .query(&QueryRequest::new(Signal::Metrics, 0, u64::MAX).with_attr("case_number", "43"))
        .unwrap();
    assert!(none.rows.is_empty());

    let registry = MetricRegistry::standard();
    let all = client.query(&QueryRequest::everything(Signal::Metrics)).unwrap();
    for row in all.metric_rows().unwrap() {
        assert!(registry.get(&row.name).is_some(), "unregistered metric {}", row.name);
    }
    let report = server.shutdown();
    assert_eq!(report.unflushed, 0);
    assert_eq!(report.stats.rejected, 0);
}

#[test]
fn query_endpoint_reports_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::new(dir.path());
    cfg.listen_address = "127.0.0.1:0".into();
    let server = CollectorServer::start(&cfg, Arc::new(SimClock::new(1))).unwrap();
    let base = server.endpoint();
    for bad in [
        "",
        "signal=logs",
        "signal=metrics&start=10&end=5",
        "signal=metrics&start=x",
        "signal=spans&trace_id=zz",
        "signal=metrics&colour=red",
    ] {
        let (status, body) = get(&format!("{base}/v1/query?{bad}"), "application/json");
        assert_eq!(status, 400, "{bad:?} gave {body}");
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert!(v["error"].is_string());
    }
    let (status, body) = get(&format!("{base}/v1/query?signal=spans"), "application/json");
    assert_eq!(status, 200);
    let empty: ResultTable = serde_json::from_str(&body).unwrap();
    assert_eq!(empty.columns, ResultTable::fixed_columns(Signal::Spans));
    assert!(empty.rows.is_empty());
    let (status, _) = get(&format!("{base}/healthz"), "text/plain");
    assert_eq!(status, 200);
    server.shutdown();
}
