use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use super::{plan, FixtureWriter, GroundTruthLedger, LedgerJob, ScenarioSpec, SimError, RSS_METRIC};
use crate::agent::{
    export_batch, Agent, AgentConfig, ExportBatch, HttpTransport, PostResult, Tick, Transport,
};
use crate::analysis::{self, Distribution, Durations, JobSelector, TimeSeries};
use crate::clock::SimClock;
use crate::collector::{CollectorServer, CollectorStats, PipelineConfig, QueryClient};
use crate::model::{names, MetricSample, Span, SpanKind, SpanStatus, TraceContext};
use crate::store::table::{MetricRow, SpanRow};
use crate::store::{QueryRequest, Signal};
use crate::trace::{format_traceparent, span_end, span_start, SpanFile, SpanStart, TRACEPARENT_ENV};

/// Analysis outputs of one scenario, or their ledger-derived expectations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analyses {
    pub max_memory: Distribution,
    /// Per-job maximum RSS by job id.
    pub per_job_max: BTreeMap<u64, f64>,
    pub total_memory: TimeSeries,
    pub active_jobs: TimeSeries,
    pub durations: Durations,
    /// Job ids of the shortest jobs, shortest first.
    pub shortest: Vec<u64>,
    /// Smallest and largest utilization sample.
    pub utilization: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComponentFailure {
    pub component: String,
    pub error: String,
}

impl ComponentFailure {
    fn new(component: &str, error: impl std::fmt::Display) -> Self {
        Self {
            component: component.to_owned(),
            error: error.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AgentTotals {
    pub rounds: u64,
    pub samples: u64,
    pub batches_exported: u64,
    pub batches_dropped: u64,
    pub records_dropped: u64,
    pub export_attempts: u64,
    pub job_end_detected: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub spec: ScenarioSpec,
    pub ledger: GroundTruthLedger,
    pub failure: Option<ComponentFailure>,
    pub store_dir: PathBuf,
    /// Analysis window `[start, end)` in unix nanos.
    pub window: (u64, u64),
    pub bucket_width: u64,
    pub shortest_k: usize,
    pub actual: Option<Analyses>,
    pub expected: Analyses,
    pub agents: AgentTotals,
    pub collector: Option<CollectorStats>,
    /// `job_id/name/time` keys of samples in batches the harness discarded.
    pub harness_dropped: Vec<String>,
    /// Spans whose id differs from the one the ledger predicted.
    pub span_id_mismatches: Vec<String>,
}

/// One request the harness sent to the collector.
#[derive(Debug, Clone)]
pub struct Payload {
    pub path: String,
    pub body: Vec<u8>,
    pub status: PostResult,
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub payloads: Vec<Payload>,
}

struct RecordingTransport {
    inner: HttpTransport,
    log: Mutex<Vec<Payload>>,
}

impl Transport for RecordingTransport {
    fn post(&self, path: &str, body: &[u8]) -> PostResult {
        let status = self.inner.post(path, body);
        self.log.lock().expect("payload log").push(Payload {
            path: path.to_owned(),
            body: body.to_vec(),
            status: status.clone(),
        });
        status
    }
}

/// Identity key used by ledger comparisons.
pub(super) fn sample_key(job_id: u64, name: &str, t: u64) -> String {
    format!("{job_id}/{name}/{t}")
}

struct RunningJob {
    agent: Agent,
    span_rng: ChaCha8Rng,
    job_ctx: TraceContext,
    task_handles: Vec<Option<String>>,
}

struct Harness<'a> {
    spec: &'a ScenarioSpec,
    ledger: &'a GroundTruthLedger,
    clock: SimClock,
    writer: FixtureWriter,
    spans: SpanFile,
    transport: Arc<RecordingTransport>,
    endpoint: String,
    metric_batches: usize,
    totals: AgentTotals,
    harness_dropped: Vec<String>,
    span_id_mismatches: Vec<String>,
}

fn no_sleep(_: Duration) {}

impl Harness<'_> {
    fn env_for(ctx: &TraceContext) -> HashMap<String, String> {
        HashMap::from([(TRACEPARENT_ENV.to_owned(), format_traceparent(ctx))])
    }

    fn check_id(&mut self, what: String, expected: crate::model::SpanId, span: &Span) {
        if span.context.span_id() != expected || span.context.trace_id() != self.ledger.trace_id {
            self.span_id_mismatches
                .push(format!("{what}: expected {expected}, got {}", span.context.span_id()));
        }
    }

    fn start_span(
        &mut self,
        req: SpanStart,
        parent: Option<&TraceContext>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Span, ComponentFailure> {
        let env = parent.map(Self::env_for).unwrap_or_default();
        let (span, _) =
            span_start(&self.spans, req, &env, &self.clock, rng).map_err(|e| ComponentFailure::new("trace", e))?;
        // The open version goes out immediately so running work is visible.
        self.export(ExportBatch::Spans(vec![span.clone()]), None);
        Ok(span)
    }

    fn end_span(&mut self, handle: &str) -> Result<(), ComponentFailure> {
        span_end(&self.spans, handle, SpanStatus::Ok, &self.clock).map_err(|e| ComponentFailure::new("trace", e))?;
        Ok(())
    }

    fn export(&mut self, batch: ExportBatch, agent: Option<&mut Agent>) -> bool {
        let policy = match &agent {
            Some(a) => a.retry_policy(),
            None => crate::agent::RetryPolicy::new(5, Duration::from_millis(1)),
        };
        let result = export_batch(&batch, &*self.transport, &policy, &no_sleep);
        if let Some(a) = agent {
            a.summary_mut().record_export(batch.len(), &result);
        }
        if !result.is_accepted() {
            warn!(records = batch.len(), ?result, "export failed");
        }
        result.is_accepted()
    }

    fn export_metrics(&mut self, state: &mut RunningJob, batch: Vec<MetricSample>) {
        let idx = self.metric_batches;
        self.metric_batches += 1;
        if self.spec.faults.drop_batches.contains(&idx) {
            debug!(batch = idx, records = batch.len(), "dropping batch by fault injection");
            self.harness_dropped
                .extend(batch.iter().map(|s| sample_key(s.job.job_id, &s.name, s.time_unix_nano)));
            return;
        }
        self.export(ExportBatch::Metrics(batch), Some(&mut state.agent));
    }

    fn flush_closed_spans(&mut self) -> Result<(), ComponentFailure> {
        let pending = self.spans.pending_exports().map_err(|e| ComponentFailure::new("trace", e))?;
        if pending.is_empty() {
            return Ok(());
        }
        if self.export(ExportBatch::Spans(pending.clone()), None) {
            self.spans
                .mark_exported(&pending)
                .map_err(|e| ComponentFailure::new("trace", e))?;
        }
        Ok(())
    }

    fn start_job(&mut self, job: &LedgerJob, pipeline: &TraceContext) -> Result<RunningJob, ComponentFailure> {
        let mut span_rng = ChaCha8Rng::seed_from_u64(job.span_seed);
        let mut req = SpanStart::new(format!("job_{}", job.job.job_id), SpanKind::Job);
        req.job = Some(job.job.clone());
        let span = self.start_span(req, Some(pipeline), &mut span_rng)?;
        self.check_id(format!("job {}", job.job.job_id), job.job_span_id, &span);

        let mut cfg = AgentConfig::new(job.job.clone());
        cfg.sample_interval = self.spec.sample_interval;
        cfg.export_endpoint = self.endpoint.clone();
        cfg.cgroup_root = self.writer.cgroup_root.clone();
        cfg.proc_root = self.writer.proc_root.clone();
        cfg.trace_id = Some(self.ledger.trace_id);
        cfg.tags
            .insert("pipeline", self.spec.pipeline_name.clone())
            .map_err(|e| ComponentFailure::new("agent", e))?;
        cfg.validate().map_err(|e| ComponentFailure::new("agent", e))?;
        Ok(RunningJob {
            agent: Agent::new(cfg),
            span_rng,
            job_ctx: span.context,
            task_handles: vec![None; job.tasks.len()],
        })
    }

    fn step_tasks(&mut self, job: &LedgerJob, state: &mut RunningJob, tick: u64) -> Result<(), ComponentFailure> {
        for (k, task) in job.tasks.iter().enumerate() {
            if task.end_tick == tick {
                if let Some(h) = state.task_handles[k].take() {
                    self.end_span(&h)?;
                }
            }
        }
        for (k, task) in job.tasks.iter().enumerate() {
            if task.start_tick == tick && task.end_tick > tick {
                let mut req = SpanStart::new(format!("task_{k}"), SpanKind::Task);
                req.job = Some(job.job.clone());
                let ctx = state.job_ctx;
                let span = self.start_span(req, Some(&ctx), &mut state.span_rng)?;
                self.check_id(format!("task {k} of job {}", job.job.job_id), task.span_id, &span);
                state.task_handles[k] = Some(span.context.span_id().to_hex());
            }
        }
        Ok(())
    }

    fn finish_job(&mut self, job: &LedgerJob, mut state: RunningJob) -> Result<(), ComponentFailure> {
        self.writer
            .remove_job(job)
            .map_err(|e| ComponentFailure::new("fixtures", e))?;
        if state.agent.tick(&self.clock) == Tick::JobEnded {
            self.totals.job_end_detected += 1;
        }
        while let Some(b) = state.agent.take_batch(true) {
            self.export_metrics(&mut state, b);
        }
        for h in state.task_handles.iter_mut().filter_map(Option::take) {
            self.end_span(&h)?;
        }
        self.end_span(&job.job_span_id.to_hex())?;
        let s = state.agent.summary();
        self.totals.rounds += s.rounds;
        self.totals.samples += s.samples;
        self.totals.batches_exported += s.batches_exported;
        self.totals.batches_dropped += s.batches_dropped;
        self.totals.records_dropped += s.records_dropped;
        self.totals.export_attempts += s.export_attempts;
        Ok(())
    }

    fn drive(&mut self) -> Result<(), ComponentFailure> {
        let ledger = self.ledger;
        let mut pipeline_rng = ChaCha8Rng::seed_from_u64(ledger.pipeline_span_seed);
        let pipeline = self.start_span(
            SpanStart::new(self.spec.pipeline_name.clone(), SpanKind::Pipeline),
            None,
            &mut pipeline_rng,
        )?;
        self.check_id("pipeline".into(), ledger.pipeline_span_id, &pipeline);
        let pipeline_ctx = pipeline.context;

        let mut running: BTreeMap<usize, RunningJob> = BTreeMap::new();
        for tick in 0..=ledger.total_ticks {
            self.clock.set(ledger.tick_time(tick));
            for job in ledger.jobs.iter().filter(|j| j.end_tick() == tick) {
                let mut state = running.remove(&job.index).expect("job was running");
                self.step_tasks(job, &mut state, tick)?;
                self.finish_job(job, state)?;
            }
            for job in ledger.jobs.iter().filter(|j| j.start_tick == tick) {
                let state = self.start_job(job, &pipeline_ctx)?;
                running.insert(job.index, state);
            }
            for (idx, state) in running.iter_mut() {
                let job = &ledger.jobs[*idx];
                self.step_tasks(job, state, tick)?;
                let k = (tick - job.start_tick) as usize;
                self.writer
                    .write_sample(job, &job.samples[k])
                    .map_err(|e| ComponentFailure::new("fixtures", e))?;
                if let Tick::Skipped = state.agent.tick(&self.clock) {
                    return Err(ComponentFailure::new(
                        "agent",
                        format!("job {} skipped a sampling round", job.job.job_id),
                    ));
                }
            }
            let ready: Vec<usize> = running.keys().copied().collect();
            for idx in ready {
                let mut state = running.remove(&idx).expect("present");
                while let Some(b) = state.agent.take_batch(false) {
                    self.export_metrics(&mut state, b);
                }
                running.insert(idx, state);
            }
            self.flush_closed_spans()?;
        }
        self.end_span(&ledger.pipeline_span_id.to_hex())?;
        self.flush_closed_spans()
    }
}

/// Expected analysis outputs computed from the ledger alone.
pub(super) fn expected_analyses(ledger: &GroundTruthLedger, window: (u64, u64), k: usize) -> Analyses {
    let width = ledger.interval_nanos;
    let horizon = 2 * width;
    let starts: Vec<u64> = (window.0..window.1).step_by(width as usize).collect();
    let per_job_max: BTreeMap<u64, f64> = ledger
        .jobs
        .iter()
        .map(|j| (j.job.job_id, j.planned_max_memory as f64))
        .collect();
    let maxima: Vec<f64> = per_job_max.values().copied().collect();
    let total_memory = starts
        .iter()
        .map(|&bs| {
            let be = bs + width;
            let mut jobs: Vec<&LedgerJob> = ledger.jobs.iter().collect();
            jobs.sort_by(|a, b| a.job.cmp(&b.job));
            jobs.iter()
                .filter_map(|j| j.samples.iter().rev().find(|s| s.time_unix_nano < be))
                .filter(|s| s.time_unix_nano >= bs || be - s.time_unix_nano <= horizon)
                .map(|s| s.rss_bytes as f64)
                .sum()
        })
        .collect();
    let active = starts
        .iter()
        .map(|&bs| {
            ledger
                .jobs
                .iter()
                .filter(|j| j.start_unix_nano < bs + width && j.end_unix_nano > bs)
                .count() as f64
        })
        .collect();
    let secs: Vec<f64> = ledger.jobs.iter().map(|j| j.planned_duration_nanos as f64 / 1e9).collect();
    let mut by_duration: Vec<(u64, u64)> = ledger
        .jobs
        .iter()
        .map(|j| (j.planned_duration_nanos, j.job.job_id))
        .collect();
    by_duration.sort();
    let has_utilization = ledger.jobs.iter().any(|j| j.samples.len() >= 2);
    Analyses {
        max_memory: Distribution::from_values(&maxima, analysis::DEFAULT_BIN_COUNT).expect("finite maxima"),
        per_job_max,
        total_memory: TimeSeries {
            bucket_width: width,
            bucket_starts: starts.clone(),
            values: total_memory,
        },
        active_jobs: TimeSeries {
            bucket_width: width,
            bucket_starts: starts,
            values: active,
        },
        durations: Durations {
            distribution: Distribution::from_values(&secs, analysis::DEFAULT_BIN_COUNT).expect("finite durations"),
            open_count: 0,
        },
        shortest: by_duration.into_iter().take(k).map(|(_, id)| id).collect(),
        utilization: has_utilization.then(|| {
            let c = ledger.jobs.first().map_or(0.0, |j| j.cpu_cores);
            (c, c)
        }),
    }
}

pub(super) fn compute_analyses(
    metrics: &[MetricRow],
    spans: &[SpanRow],
    window: (u64, u64),
    width: u64,
    k: usize,
) -> Result<Analyses, analysis::AnalysisError> {
    let per_job_max = analysis::per_job_max(metrics, RSS_METRIC)
        .into_iter()
        .map(|(job, v)| (job.job_id, v))
        .collect();
    let utilization = metrics
        .iter()
        .filter(|r| r.name == names::CPU_UTILIZATION)
        .map(|r| r.value)
        .fold(None, |acc: Option<(f64, f64)>, v| {
            Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))))
        });
    Ok(Analyses {
        max_memory: analysis::max_per_job_distribution(metrics, RSS_METRIC, analysis::DEFAULT_BIN_COUNT)?,
        per_job_max,
        total_memory: analysis::total_usage_over_time(metrics, RSS_METRIC, width, width, Some(window))?,
        active_jobs: analysis::active_jobs_timeline(spans, width, Some(window))?,
        durations: analysis::job_durations(spans, analysis::DEFAULT_BIN_COUNT)?,
        shortest: if k == 0 {
            Vec::new()
        } else {
            analysis::per_job_grid(metrics, spans, RSS_METRIC, &JobSelector::ShortestK(k))?
                .into_iter()
                .map(|p| p.job.job_id)
                .collect()
        },
        utilization,
    })
}

fn query_all(endpoint: &str, window: (u64, u64)) -> Result<(Vec<MetricRow>, Vec<SpanRow>), ComponentFailure> {
    let client = QueryClient::new(endpoint, Duration::from_secs(30));
    let fail = |e| ComponentFailure::new("query", e);
    let metrics = client
        .query(&QueryRequest::new(Signal::Metrics, window.0, window.1))
        .map_err(fail)?
        .metric_rows()
        .map_err(|e| ComponentFailure::new("query", e))?;
    let spans = client
        .query(&QueryRequest::new(Signal::Spans, window.0, window.1))
        .map_err(fail)?
        .span_rows()
        .map_err(|e| ComponentFailure::new("query", e))?;
    Ok((metrics, spans))
}

/// Runs the scenario end to end under a simulated clock, with a live
/// collector on an ephemeral local port and one agent per job.
///
/// `work_dir` receives the fixture trees, span state, the store and the ledger.
pub fn run_scenario(spec: &ScenarioSpec, work_dir: &Path) -> Result<ScenarioRun, SimError> {
    let ledger = plan(spec)?;
    let ledger_path = work_dir.join("ledger.json");
    std::fs::create_dir_all(work_dir)
        .and_then(|_| std::fs::write(&ledger_path, serde_json::to_vec(&ledger).expect("ledger serializes")))
        .map_err(|source| SimError::Fixture {
            path: ledger_path.clone(),
            source,
        })?;

    let interval = ledger.interval_nanos;
    let window = (ledger.start_unix_nano, ledger.end_unix_nano().max(ledger.start_unix_nano + interval));
    let shortest_k = if spec.planted_outliers.is_empty() {
        spec.job_count.min(5)
    } else {
        spec.planted_outliers.len()
    };
    let store_dir = work_dir.join("store");
    let mut report = ScenarioReport {
        spec: spec.clone(),
        expected: expected_analyses(&ledger, window, shortest_k),
        ledger: ledger.clone(),
        failure: None,
        store_dir: store_dir.clone(),
        window,
        bucket_width: interval,
        shortest_k,
        actual: None,
        agents: AgentTotals::default(),
        collector: None,
        harness_dropped: Vec::new(),
        span_id_mismatches: Vec::new(),
    };

    let clock = SimClock::new(ledger.start_unix_nano);
    let mut cfg = PipelineConfig::new(store_dir);
    cfg.listen_address = "127.0.0.1:0".into();
    let server = match CollectorServer::start(&cfg, Arc::new(clock.clone())) {
        Ok(s) => s,
        Err(e) => {
            report.failure = Some(ComponentFailure::new("collector", e));
            return Ok(ScenarioRun {
                report,
                payloads: Vec::new(),
            });
        }
    };
    if spec.faults.collector_outage_attempts > 0 {
        server.collector().inject_unavailable(spec.faults.collector_outage_attempts);
    }
    let endpoint = server.endpoint();
    let transport = Arc::new(RecordingTransport {
        inner: HttpTransport::new(&endpoint, Duration::from_secs(30)),
        log: Mutex::new(Vec::new()),
    });
    let mut harness = Harness {
        spec,
        ledger: &ledger,
        clock,
        writer: FixtureWriter::new(work_dir, spec.cgroup_version),
        spans: SpanFile::new(&work_dir.join("state")),
        transport: transport.clone(),
        endpoint: endpoint.clone(),
        metric_batches: 0,
        totals: AgentTotals::default(),
        harness_dropped: Vec::new(),
        span_id_mismatches: Vec::new(),
    };
    let driven = harness.drive();
    report.agents = std::mem::take(&mut harness.totals);
    report.harness_dropped = std::mem::take(&mut harness.harness_dropped);
    report.span_id_mismatches = std::mem::take(&mut harness.span_id_mismatches);
    drop(harness);

    server.collector().flush();
    let outcome = driven.and_then(|_| query_all(&endpoint, window)).and_then(|(metrics, spans)| {
        compute_analyses(&metrics, &spans, window, interval, shortest_k)
            .map_err(|e| ComponentFailure::new("analysis", e))
    });
    match outcome {
        Ok(a) => report.actual = Some(a),
        Err(f) => report.failure = Some(f),
    }
    let shutdown = server.shutdown();
    if shutdown.unflushed > 0 && report.failure.is_none() {
        report.failure = Some(ComponentFailure::new(
            "collector",
            format!("{} records unflushed at shutdown", shutdown.unflushed),
        ));
    }
    report.collector = Some(shutdown.stats);
    info!(
        jobs = spec.job_count,
        failed = report.failure.is_some(),
        "scenario finished"
    );
    let payloads = Arc::try_unwrap(transport)
        .map(|t| t.log.into_inner().expect("payload log"))
        .unwrap_or_else(|t| t.log.lock().expect("payload log").clone());
    Ok(ScenarioRun { report, payloads })
}
