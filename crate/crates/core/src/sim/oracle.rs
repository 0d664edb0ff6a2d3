use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Debug;

use serde::Serialize;

use super::run::{sample_key, Analyses, ScenarioReport};
use crate::analysis::Distribution;
use crate::model::{names, MetricSample, Span, SpanKind};
use crate::store::{QueryRequest, Signal, Store, StoredRecord};

/// One mismatch between an observed and an expected value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diff {
    pub check: String,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OracleVerdict {
    pub passed: bool,
    pub diffs: Vec<Diff>,
}

impl OracleVerdict {
    /// Identities listed by the record-conservation check.
    pub fn missing_records(&self) -> BTreeSet<String> {
        self.diffs
            .iter()
            .filter(|d| d.check == "records.missing")
            .flat_map(|d| d.expected.split(',').map(str::to_owned))
            .collect()
    }
}

#[derive(Default)]
struct Diffs(Vec<Diff>);

impl Diffs {
    fn push(&mut self, check: &str, expected: impl Debug, actual: impl Debug) {
        self.0.push(Diff {
            check: check.to_owned(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        });
    }

    fn eq<T: PartialEq + Debug>(&mut self, check: &str, expected: T, actual: T) {
        if expected != actual {
            self.push(check, expected, actual);
        }
    }

    fn close(&mut self, check: &str, expected: &[f64], actual: &[f64], ulps: f64) {
        let ok = expected.len() == actual.len()
            && expected.iter().zip(actual).all(|(e, a)| {
                e == a || (e - a).abs() <= f64::EPSILON * e.abs().max(a.abs()) * ulps
            });
        if !ok {
            self.push(check, expected, actual);
        }
    }

    fn distribution(&mut self, check: &str, expected: &Distribution, actual: &Distribution) {
        self.eq(&format!("{check}.counts"), &expected.counts, &actual.counts);
        self.eq(&format!("{check}.bin_edges"), &expected.bin_edges, &actual.bin_edges);
        self.eq(&format!("{check}.min"), expected.min, actual.min);
        self.eq(&format!("{check}.max"), expected.max, actual.max);
        self.close(&format!("{check}.mean"), &[expected.mean], &[actual.mean], 4.0);
    }
}

fn compare(d: &mut Diffs, source: &str, expected: &Analyses, actual: &Analyses) {
    let c = |name: &str| format!("{source}.{name}");
    d.eq(&c("per_job_max"), &expected.per_job_max, &actual.per_job_max);
    d.distribution(&c("max_memory"), &expected.max_memory, &actual.max_memory);
    d.eq(&c("total_memory.buckets"), &expected.total_memory.bucket_starts, &actual.total_memory.bucket_starts);
    d.close(&c("total_memory.values"), &expected.total_memory.values, &actual.total_memory.values, 1.0);
    d.eq(&c("active_jobs"), &expected.active_jobs, &actual.active_jobs);
    d.distribution(&c("durations"), &expected.durations.distribution, &actual.durations.distribution);
    d.eq(&c("durations.open_count"), expected.durations.open_count, actual.durations.open_count);
    d.eq(&c("shortest"), &expected.shortest, &actual.shortest);
    match (expected.utilization, actual.utilization) {
        (Some(e), Some(a)) if (e.0 - a.0).abs() <= 1e-6 && (e.1 - a.1).abs() <= 1e-6 => {}
        (None, None) => {}
        (e, a) => d.push(&c("utilization"), e, a),
    }
}

/// Closed version of each span wins over the open one.
fn latest_spans(records: Vec<StoredRecord>) -> Vec<Span> {
    let mut by_id: BTreeMap<(String, String), Span> = BTreeMap::new();
    for r in records {
        if let StoredRecord::Span(s) = r {
            let key = (s.span.context.trace_id().to_hex(), s.span.context.span_id().to_hex());
            match by_id.get(&key) {
                Some(prev) if prev.is_closed() => {}
                _ => {
                    by_id.insert(key, s.span);
                }
            }
        }
    }
    by_id.into_values().collect()
}

/// Recomputes every analysis by direct scans over raw store records.
fn scan_store(report: &ScenarioReport, metrics: &[MetricSample], spans: &[Span]) -> Analyses {
    let (w0, w1) = report.window;
    let width = report.bucket_width;
    let starts: Vec<u64> = (w0..w1).step_by(width as usize).collect();
    let rss: Vec<&MetricSample> = metrics.iter().filter(|m| m.name == names::MEMORY_RSS).collect();

    let mut per_job_max: BTreeMap<u64, f64> = BTreeMap::new();
    for m in &rss {
        let v = m.value.as_f64();
        let e = per_job_max.entry(m.job.job_id).or_insert(v);
        if v > *e {
            *e = v;
        }
    }
    let mut jobs: Vec<_> = rss.iter().map(|m| m.job.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    jobs.sort();
    let total = starts
        .iter()
        .map(|&bs| {
            let be = bs + width;
            let mut sum = 0.0;
            for j in &jobs {
                let last = rss
                    .iter()
                    .filter(|m| m.job == *j && m.time_unix_nano < be)
                    .max_by_key(|m| m.time_unix_nano);
                if let Some(m) = last {
                    if m.time_unix_nano >= bs || be - m.time_unix_nano <= 2 * width {
                        sum += m.value.as_f64();
                    }
                }
            }
            sum
        })
        .collect();
    let job_spans: Vec<&Span> = spans.iter().filter(|s| s.kind == SpanKind::Job).collect();
    let active = starts
        .iter()
        .map(|&bs| {
            job_spans
                .iter()
                .filter(|s| s.start_unix_nano < bs + width && s.end_unix_nano.is_none_or(|e| e > bs))
                .count() as f64
        })
        .collect();
    let secs: Vec<f64> = job_spans
        .iter()
        .filter_map(|s| s.duration_nanos())
        .map(|d| d as f64 / 1e9)
        .collect();
    let mut ranked: Vec<(u64, u64)> = job_spans
        .iter()
        .filter_map(|s| Some((s.duration_nanos()?, s.job.as_ref()?.job_id)))
        .collect();
    ranked.sort();
    let util: Vec<f64> = metrics
        .iter()
        .filter(|m| m.name == names::CPU_UTILIZATION)
        .map(|m| m.value.as_f64())
        .collect();
    Analyses {
        max_memory: Distribution::from_values(
            &per_job_max.values().copied().collect::<Vec<_>>(),
            crate::analysis::DEFAULT_BIN_COUNT,
        )
        .expect("finite"),
        per_job_max,
        total_memory: crate::analysis::TimeSeries {
            bucket_width: width,
            bucket_starts: starts.clone(),
            values: total,
        },
        active_jobs: crate::analysis::TimeSeries {
            bucket_width: width,
            bucket_starts: starts,
            values: active,
        },
        durations: crate::analysis::Durations {
            distribution: Distribution::from_values(&secs, crate::analysis::DEFAULT_BIN_COUNT).expect("finite"),
            open_count: (job_spans.len() - secs.len()) as u64,
        },
        shortest: ranked.into_iter().take(report.shortest_k).map(|(_, id)| id).collect(),
        utilization: util.iter().copied().fold(None, |acc: Option<(f64, f64)>, v| {
            Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))))
        }),
    }
}

fn check_trace(d: &mut Diffs, report: &ScenarioReport, spans: &[Span]) {
    let ledger = &report.ledger;
    let roots: Vec<&Span> = spans.iter().filter(|s| s.parent_span_id.is_none()).collect();
    d.eq("trace.roots", 1, roots.len());
    if let Some(root) = roots.first() {
        d.eq("trace.root_kind", SpanKind::Pipeline, root.kind);
        d.eq("trace.root_id", ledger.pipeline_span_id, root.context.span_id());
    }
    let trace_ids: BTreeSet<String> = spans.iter().map(|s| s.context.trace_id().to_hex()).collect();
    if spans.is_empty() {
        d.push("trace.spans", "pipeline span", "none");
    } else {
        d.eq("trace.trace_ids", BTreeSet::from([ledger.trace_id.to_hex()]), trace_ids);
    }
    let job_ids: BTreeSet<_> = spans.iter().filter(|s| s.kind == SpanKind::Job).map(|s| s.context.span_id()).collect();
    for s in spans {
        let ok = match s.kind {
            SpanKind::Job => s.parent_span_id == Some(ledger.pipeline_span_id),
            SpanKind::Task => s.parent_span_id.is_some_and(|p| job_ids.contains(&p)),
            _ => true,
        };
        if !ok {
            d.push(&format!("trace.parent.{}", s.context.span_id()), s.kind, s.parent_span_id);
        }
        if !s.is_closed() {
            d.push(&format!("trace.closed.{}", s.context.span_id()), "closed", "open");
        }
    }
    let expected_count = 1 + ledger.jobs.iter().map(|j| 1 + j.tasks.len()).sum::<usize>();
    d.eq("trace.span_count", expected_count, spans.len());
    if !report.span_id_mismatches.is_empty() {
        d.push("trace.ledger_ids", "ids as planned", &report.span_id_mismatches);
    }
}

/// Checks a finished scenario against its ledger and against brute-force
/// recomputation from the raw store.
pub fn oracle_check(report: &ScenarioReport) -> OracleVerdict {
    let mut d = Diffs::default();
    if let Some(f) = &report.failure {
        d.push("scenario.component", "no failure", f);
    }
    let cap = report.spec.concurrency_cap;
    let peak = report.ledger.peak_concurrency();
    if peak > cap {
        d.push("schedule.cap", cap, peak);
    }

    let raw = Store::open(&report.store_dir).and_then(|store| {
        let m = store.query_records(&QueryRequest::everything(Signal::Metrics))?;
        let s = store.query_records(&QueryRequest::everything(Signal::Spans))?;
        Ok((m, s))
    });
    let (metric_records, span_records) = match raw {
        Ok(r) => r,
        Err(e) => {
            d.push("store.open", "readable store", e.to_string());
            return OracleVerdict {
                passed: false,
                diffs: d.0,
            };
        }
    };
    let metrics: Vec<MetricSample> = metric_records
        .into_iter()
        .filter_map(|r| match r {
            StoredRecord::Metric(m) => Some(m.sample),
            StoredRecord::Span(_) => None,
        })
        .collect();
    let spans = latest_spans(span_records);

    // Record conservation against the ledger.
    let mut expected_keys = BTreeSet::new();
    for job in &report.ledger.jobs {
        for (k, s) in job.samples.iter().enumerate() {
            let per_sample = [
                names::MEMORY_RSS,
                names::MEMORY_CACHE,
                names::MEMORY_CURRENT,
                names::OPEN_FILES,
                names::PIDS,
                names::CPU_TIME,
            ];
            for n in per_sample {
                expected_keys.insert(sample_key(job.job.job_id, n, s.time_unix_nano));
            }
            if k > 0 {
                expected_keys.insert(sample_key(job.job.job_id, names::CPU_UTILIZATION, s.time_unix_nano));
            }
        }
    }
    let mut stored_counts: HashMap<String, usize> = HashMap::new();
    for m in &metrics {
        *stored_counts
            .entry(sample_key(m.job.job_id, &m.name, m.time_unix_nano))
            .or_default() += 1;
    }
    let stored_keys: BTreeSet<String> = stored_counts.keys().cloned().collect();
    let missing: Vec<&String> = expected_keys.difference(&stored_keys).collect();
    if !missing.is_empty() {
        d.0.push(Diff {
            check: "records.missing".into(),
            expected: missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
            actual: "absent from store".into(),
        });
    }
    let extra: Vec<&String> = stored_keys.difference(&expected_keys).collect();
    if !extra.is_empty() {
        d.push("records.unexpected", "none", extra);
    }
    let dupes: Vec<&String> = stored_counts.iter().filter(|(_, c)| **c > 1).map(|(k, _)| k).collect();
    if !dupes.is_empty() {
        d.push("records.duplicates", "none", dupes);
    }

    // Stored counter values against the ledger.
    let ledger_values: HashMap<String, f64> = report
        .ledger
        .jobs
        .iter()
        .flat_map(|j| {
            j.samples.iter().flat_map(move |s| {
                [
                    (names::MEMORY_RSS, s.rss_bytes),
                    (names::MEMORY_CACHE, s.cache_bytes),
                    (names::MEMORY_CURRENT, s.memory_current_bytes),
                    (names::OPEN_FILES, s.open_files),
                    (names::PIDS, s.pids),
                    (names::CPU_TIME, s.cpu_ns),
                ]
                .map(|(n, v)| (sample_key(j.job.job_id, n, s.time_unix_nano), v as f64))
            })
        })
        .collect();
    for m in &metrics {
        let key = sample_key(m.job.job_id, &m.name, m.time_unix_nano);
        if let Some(v) = ledger_values.get(&key) {
            if *v != m.value.as_f64() {
                d.push(&format!("records.value.{key}"), v, m.value.as_f64());
            }
        }
    }

    match &report.actual {
        Some(actual) => {
            compare(&mut d, "ledger", &report.expected, actual);
            let scanned = scan_store(report, &metrics, &spans);
            compare(&mut d, "store_scan", &scanned, actual);
        }
        None => d.push("analysis", "analysis outputs", "none"),
    }
    check_trace(&mut d, report, &spans);

    OracleVerdict {
        passed: d.0.is_empty(),
        diffs: d.0,
    }
}
