use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::*;
use crate::clock::SimClock;
use crate::model::wire::{encode_metrics, encode_spans};
use crate::model::{
    names, JobIdentity, MetricKind, MetricSample, MetricValue, Span, SpanId, SpanKind, SpanStatus,
    TagSet, TraceContext, TraceFlags, TraceId,
};
use crate::store::{QueryRequest, Signal, StoredRecord};

fn job() -> JobIdentity {
    JobIdentity::new(1000, 42, None, "node01").unwrap()
}

fn tags(pairs: &[(&str, &str)]) -> TagSet {
    let mut t = TagSet::default();
    for (k, v) in pairs {
        t.insert(k, *v).unwrap();
    }
    t
}

fn samples(n: u64, tags: &TagSet) -> Vec<MetricSample> {
    (1..=n)
        .map(|i| MetricSample {
            name: names::MEMORY_RSS.into(),
            unit: "By".into(),
            time_unix_nano: i * 1_000,
            value: MetricValue::Int(i as i64),
            kind: MetricKind::Gauge,
            job: job(),
            tags: tags.clone(),
            trace_id: None,
        })
        .collect()
}

fn metrics_doc(samples: &[MetricSample]) -> Value {
    let docs = encode_metrics(samples);
    assert_eq!(docs.len(), 1);
    serde_json::to_value(&docs[0]).unwrap()
}

fn span_doc(end: Option<u64>) -> Value {
    let span = Span {
        name: "job".into(),
        context: TraceContext::new(TraceId::from_bytes([7; 16]), SpanId::from_bytes([8; 8]), TraceFlags::SAMPLED)
            .unwrap(),
        parent_span_id: None,
        start_unix_nano: 100,
        end_unix_nano: end,
        kind: SpanKind::Job,
        attributes: TagSet::default(),
        status: SpanStatus::Ok,
        job: Some(job()),
    };
    serde_json::to_value(&encode_spans(&[span])[0]).unwrap()
}

fn start(cfg: &PipelineConfig) -> Collector {
    Collector::start(cfg, Arc::new(SimClock::new(5_000))).unwrap()
}

fn config(dir: &std::path::Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(dir);
    cfg.store_retry_base = Duration::from_millis(5);
    cfg
}

#[test]
fn valid_payload_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(&config(dir.path()));
    let r = c.ingest(Signal::Metrics, &metrics_doc(&samples(6, &TagSet::default()))).unwrap();
    assert_eq!((r.accepted, r.rejected), (6, 0));
    c.flush();
    let stored = c.store().query_records(&QueryRequest::everything(Signal::Metrics)).unwrap();
    assert_eq!(stored.len(), 6);
    let StoredRecord::Metric(m) = &stored[0] else { panic!() };
    assert_eq!(m.received_unix_nano, 5_000);
}

#[test]
fn missing_time_rejects_only_that_point() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(&config(dir.path()));
    let mut doc = metrics_doc(&samples(5, &TagSet::default()));
    doc["metrics"][0]["points"][2].as_object_mut().unwrap().remove("timeUnixNano");
    let r = c.ingest(Signal::Metrics, &doc).unwrap();
    assert_eq!((r.accepted, r.rejected), (4, 1));
    assert_eq!(r.errors[0].field, "metrics[0].points[2].timeUnixNano");
}

#[test]
fn schema_violation_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(&config(dir.path()));
    let err = c.ingest(Signal::Metrics, &json!({"resource": {"attributes": {}}})).unwrap_err();
    let IngestError::Schema(e) = err else { panic!("{err}") };
    assert!(e.field.starts_with("resource"), "{}", e.field);
}

#[test]
fn unregistered_metric_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(&config(dir.path()));
    let mut s = samples(2, &TagSet::default());
    s[1].unit = "KiBy".into();
    let mut doc = metrics_doc(&s[..1]);
    doc["metrics"][0]["name"] = json!("job.gpu.temperature");
    let r = c.ingest(Signal::Metrics, &doc).unwrap();
    assert_eq!((r.accepted, r.rejected), (0, 1));
    assert_eq!(r.errors[0].field, "name");
    let r = c.ingest(Signal::Metrics, &metrics_doc(&s[1..])).unwrap();
    assert_eq!(r.errors[0].field, "unit");
}

#[test]
fn replayed_span_is_duplicate() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(&config(dir.path()));
    assert_eq!(c.ingest(Signal::Spans, &span_doc(None)).unwrap().accepted, 1);
    assert_eq!(c.ingest(Signal::Spans, &span_doc(Some(200))).unwrap().accepted, 1);
    let r = c.ingest(Signal::Spans, &span_doc(Some(200))).unwrap();
    assert_eq!((r.accepted, r.duplicates), (0, 1));
    c.shutdown();
    // A restarted collector remembers what is already stored.
    let c = start(&config(dir.path()));
    let r = c.ingest(Signal::Spans, &span_doc(Some(200))).unwrap();
    assert_eq!(r.duplicates, 1);
    let rows = c.store().query_records(&QueryRequest::everything(Signal::Spans)).unwrap();
    assert_eq!(rows.len(), 1);
}

#[test]
fn filter_rules() {
    let filters = vec![Filter::compile("drop_rules", &[DropRule::new("step_name", "^debug$")]).unwrap()];
    let rec = |t: &TagSet| StoredRecord::metric(samples(1, t)[0].clone(), 1);
    assert_eq!(
        apply_filter(&rec(&tags(&[("step_name", "debug")])), &filters),
        FilterDecision::Drop {
            rule_id: "drop_rules[0]".into()
        }
    );
    assert_eq!(apply_filter(&rec(&tags(&[("case_number", "1")])), &filters), FilterDecision::Keep);
    assert_eq!(apply_filter(&rec(&tags(&[("step_name", "debug")])), &[]), FilterDecision::Keep);
}

#[test]
fn filters_drop_before_store() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.processors.push(ProcessorConfig::Filter(vec![DropRule::new("step_name", "^debug$")]));
    let c = start(&cfg);
    let r = c.ingest(Signal::Metrics, &metrics_doc(&samples(3, &tags(&[("step_name", "debug")])))).unwrap();
    assert_eq!((r.accepted, r.dropped), (0, 3));
    c.ingest(Signal::Metrics, &metrics_doc(&samples(3, &tags(&[("step_name", "fem")])))).unwrap();
    let report = c.shutdown();
    assert_eq!(report.stats.records_written, 3);
}

#[test]
fn size_and_timer_flushes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.processors.push(ProcessorConfig::Batch(BatchConfig {
        max_records: 10,
        max_delay: Duration::from_millis(50),
    }));
    let c = start(&cfg);
    c.ingest(Signal::Metrics, &metrics_doc(&samples(25, &TagSet::default()))).unwrap();
    std::thread::sleep(Duration::from_millis(300));
    let stats = c.stats();
    assert_eq!(stats.flushes.get(&FlushTrigger::Size), Some(&2));
    assert_eq!(stats.flushes.get(&FlushTrigger::Timer), Some(&1));
    assert_eq!(c.store().record_count(Signal::Metrics), 25);
    let segs = c.store().segments();
    assert_eq!(segs.len(), 1);

    // Nothing buffered: the timer never writes.
    std::thread::sleep(Duration::from_millis(150));
    assert_eq!(c.stats().flushes.get(&FlushTrigger::Timer), Some(&1));
    assert_eq!(c.store().segments(), segs);
}

#[test]
fn shutdown_flushes_remainder() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.processors.push(ProcessorConfig::Batch(BatchConfig {
        max_records: 10,
        max_delay: Duration::from_secs(60),
    }));
    let c = start(&cfg);
    c.ingest(Signal::Metrics, &metrics_doc(&samples(25, &TagSet::default()))).unwrap();
    let report = c.shutdown();
    assert_eq!(report.unflushed, 0);
    assert_eq!(report.stats.flushes.get(&FlushTrigger::Size), Some(&2));
    assert_eq!(report.stats.flushes.get(&FlushTrigger::Shutdown), Some(&1));
    assert_eq!(c.store().record_count(Signal::Metrics), 25);
    assert!(matches!(
        c.ingest(Signal::Metrics, &metrics_doc(&samples(26, &TagSet::default())[25..])),
        Err(IngestError::Closed)
    ));
}

#[test]
fn store_outage_retried_without_loss_or_duplication() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(&config(dir.path()));
    c.store().inject_append_failures(3);
    let s = samples(40, &TagSet::default());
    c.ingest(Signal::Metrics, &metrics_doc(&s)).unwrap();
    c.flush();
    let report = c.shutdown();
    assert_eq!(report.stats.write_failures, 3);
    let stored: std::collections::HashSet<String> = c
        .store()
        .query_records(&QueryRequest::everything(Signal::Metrics))
        .unwrap()
        .iter()
        .map(|r| r.id().to_owned())
        .collect();
    let expected: std::collections::HashSet<String> =
        s.iter().map(crate::store::metric_identity).collect();
    assert_eq!(stored, expected);
    assert_eq!(c.store().record_count(Signal::Metrics), 40);
}

#[test]
fn shutdown_deadline_reports_unflushed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.shutdown_deadline = Duration::from_millis(100);
    cfg.processors.push(ProcessorConfig::Batch(BatchConfig {
        max_records: 100,
        max_delay: Duration::from_secs(60),
    }));
    let c = start(&cfg);
    c.ingest(Signal::Metrics, &metrics_doc(&samples(7, &TagSet::default()))).unwrap();
    c.store().inject_append_failures(u32::MAX);
    let report = c.shutdown();
    assert_eq!(report.unflushed, 7);
}

#[test]
fn injected_unavailability() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(&config(dir.path()));
    c.inject_unavailable(2);
    let doc = metrics_doc(&samples(1, &TagSet::default()));
    assert!(matches!(c.ingest(Signal::Metrics, &doc), Err(IngestError::Unavailable(_))));
    assert!(matches!(c.ingest(Signal::Metrics, &doc), Err(IngestError::Unavailable(_))));
    assert_eq!(c.ingest(Signal::Metrics, &doc).unwrap().accepted, 1);
}

#[test]
fn config_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pipeline.toml");
    std::fs::write(
        &path,
        format!(
            r#"
listen_address = "127.0.0.1:0"
store_dir = "{}"

[[processors]]
filter = [{{ key = "step_name", regex = "^debug$" }}]

[[processors]]
batch = {{ max_records = 10, max_delay = "2s" }}

[[drop_rules]]
key = "pipeline_name"
regex = "^test"
"#,
            dir.path().join("store").display()
        ),
    )
    .unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.batch().max_records, 10);
    assert_eq!(cfg.batch().max_delay, Duration::from_secs(2));
    let ids: Vec<String> = cfg
        .compile_filters()
        .unwrap()
        .iter()
        .flat_map(|f| f.rules.iter().map(|r| r.id.clone()))
        .collect();
    assert_eq!(ids, ["drop_rules[0]", "processors[0].filter[0]"]);

    let json_path = dir.path().join("pipeline.json");
    std::fs::write(
        &json_path,
        serde_json::to_string(&json!({
            "store_dir": dir.path(),
            "drop_rules": [{"key": "step_name", "regex": "(unclosed"}]
        }))
        .unwrap(),
    )
    .unwrap();
    assert!(matches!(PipelineConfig::load(&json_path), Err(ConfigError::Regex { .. })));

    let mut two = PipelineConfig::new(dir.path());
    two.processors = vec![
        ProcessorConfig::Batch(BatchConfig::default()),
        ProcessorConfig::Batch(BatchConfig::default()),
    ];
    assert!(matches!(two.validate(), Err(ConfigError::Invalid(_))));
    let mut zero = PipelineConfig::new(dir.path());
    zero.processors = vec![ProcessorConfig::Batch(BatchConfig {
        max_records: 0,
        max_delay: Duration::from_secs(1),
    })];
    assert!(zero.validate().is_err());
}

#[test]
fn query_params() {
    let req = parse_query_params("signal=metrics&start=1&end=9&name=a,b&name=c&attr.pipeline_name=solver").unwrap();
    assert_eq!(req.signal, Signal::Metrics);
    assert_eq!((req.start_time, req.end_time), (1, 9));
    assert_eq!(req.metric_names.as_deref().unwrap(), ["a", "b", "c"]);
    assert_eq!(req.attribute_filters["pipeline_name"], "solver");
    assert!(parse_query_params("signal=logs").is_err());
    assert!(parse_query_params("signal=spans&start=5&end=5").unwrap_err().contains("invalid time range"));
    assert!(parse_query_params("start=1").is_err());
    assert!(parse_query_params("signal=spans&trace_id=zz").is_err());
}
