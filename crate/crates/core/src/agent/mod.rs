//! Per-job monitoring agent.
//!
//! The agent samples a job's cgroup at a fixed interval, turns each snapshot
//! into metric samples, batches them and pushes the batches to a collector.
//! Export failures never propagate to the job: batches that cannot be delivered
//! are dropped and counted.

mod config;
mod export;
mod sampler;

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::Serialize;
use tracing::{info, warn};

pub use config::{
    parse_monitoring_args, AgentConfig, AgentConfigError, ARRAY_TASK_ID_ENV, DEFAULT_ENDPOINT,
    ENDPOINT_ENV, JOB_ID_ENV,
};
pub use export::{
    export_batch, ExportBatch, ExportResult, HttpTransport, PostResult, RetryPolicy, Transport,
};
pub use sampler::{derive_samples, sample_once, AgentWarning, Round, SampleOutcome, Sampler};

use crate::clock::Clock;
use crate::model::MetricSample;

/// Capacity of the queue between the sampling loop and the exporter.
pub const EXPORT_QUEUE_CAPACITY: usize = 4;

/// Cloneable stop flag that can be raised from any thread.
#[derive(Debug, Clone, Default)]
pub struct StopSignal(Arc<(Mutex<bool>, Condvar)>);

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        let (flag, cv) = &*self.0;
        *flag.lock().expect("stop lock") = true;
        cv.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        *self.0 .0.lock().expect("stop lock")
    }

    /// Sleeps up to `d`; returns true if stopped.
    pub fn wait(&self, d: Duration) -> bool {
        let (flag, cv) = &*self.0;
        let guard = flag.lock().expect("stop lock");
        let (guard, _) = cv
            .wait_timeout_while(guard, d, |stopped| !*stopped)
            .expect("stop lock");
        *guard
    }
}

/// Waits between sampling rounds. Real runs sleep; simulated runs advance a
/// simulated clock instead.
pub trait Pacer: Send + Sync {
    /// Returns true if the run should stop.
    fn wait(&self, interval: Duration, stop: &StopSignal) -> bool;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RealTimePacer;

impl Pacer for RealTimePacer {
    fn wait(&self, interval: Duration, stop: &StopSignal) -> bool {
        stop.wait(interval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Signal,
    JobEnded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub rounds: u64,
    /// Rounds that produced samples.
    pub sampled_rounds: u64,
    pub skipped: u64,
    pub samples: u64,
    pub batches_exported: u64,
    pub batches_dropped: u64,
    pub records_dropped: u64,
    pub export_attempts: u64,
    pub stop_reason: StopReason,
    pub warnings: Vec<AgentWarning>,
}

impl RunSummary {
    fn new() -> Self {
        Self {
            rounds: 0,
            sampled_rounds: 0,
            skipped: 0,
            samples: 0,
            batches_exported: 0,
            batches_dropped: 0,
            records_dropped: 0,
            export_attempts: 0,
            stop_reason: StopReason::Signal,
            warnings: Vec::new(),
        }
    }

    /// Agent exit status: always success, whatever happened to exports.
    pub fn exit_code(&self) -> i32 {
        0
    }

    pub fn record_export(&mut self, records: usize, result: &ExportResult) {
        self.export_attempts += u64::from(result.attempts());
        if result.is_accepted() {
            self.batches_exported += 1;
        } else {
            self.batches_dropped += 1;
            self.records_dropped += records as u64;
            let error = match result {
                ExportResult::Rejected { status, .. } => format!("rejected with status {status}"),
                ExportResult::RetriesExhausted { last_error, .. } => last_error.clone(),
                ExportResult::Accepted { .. } => unreachable!(),
            };
            self.warnings.push(AgentWarning::ExportFailed { records, error });
        }
    }
}

/// Sampling state plus the batch under construction. Drives one round per
/// [`tick`](Agent::tick); exporting is left to the caller.
#[derive(Debug, Clone)]
pub struct Agent {
    sampler: Sampler,
    pending: Vec<MetricSample>,
    summary: RunSummary,
}

/// What one tick did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tick {
    Sampled(usize),
    Skipped,
    JobEnded,
}

impl Agent {
    pub fn new(cfg: AgentConfig) -> Self {
        Self {
            sampler: Sampler::new(cfg),
            pending: Vec::new(),
            summary: RunSummary::new(),
        }
    }

    pub fn config(&self) -> &AgentConfig {
        self.sampler.config()
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        let cfg = self.config();
        let mut p = RetryPolicy::new(cfg.max_retry, cfg.backoff_base);
        p.seed ^= cfg.job.job_id;
        p
    }

    pub fn tick(&mut self, clock: &dyn Clock) -> Tick {
        match self.sampler.sample(clock) {
            SampleOutcome::JobEnded => {
                self.summary.stop_reason = StopReason::JobEnded;
                Tick::JobEnded
            }
            SampleOutcome::Skipped(w) => {
                self.summary.rounds += 1;
                self.summary.skipped += 1;
                warn!(?w, "sampling round skipped");
                self.summary.warnings.push(w);
                Tick::Skipped
            }
            SampleOutcome::Sampled { samples, warning } => {
                self.summary.rounds += 1;
                self.summary.sampled_rounds += 1;
                self.summary.samples += samples.len() as u64;
                self.summary.warnings.extend(warning);
                let n = samples.len();
                self.pending.extend(samples);
                Tick::Sampled(n)
            }
        }
    }

    /// The next full batch, or with `force` whatever is pending.
    pub fn take_batch(&mut self, force: bool) -> Option<Vec<MetricSample>> {
        let max = self.config().batch_max_samples;
        if self.pending.len() >= max {
            let rest = self.pending.split_off(max);
            Some(std::mem::replace(&mut self.pending, rest))
        } else if force && !self.pending.is_empty() {
            Some(std::mem::take(&mut self.pending))
        } else {
            None
        }
    }

    pub fn summary(&self) -> &RunSummary {
        &self.summary
    }

    pub fn summary_mut(&mut self) -> &mut RunSummary {
        &mut self.summary
    }
}

struct ExportQueue {
    state: Mutex<(VecDeque<Vec<MetricSample>>, bool)>,
    cv: Condvar,
}

impl ExportQueue {
    /// Enqueues, evicting the oldest batch when full. Returns the evicted batch.
    fn push(&self, batch: Vec<MetricSample>) -> Option<Vec<MetricSample>> {
        let mut st = self.state.lock().expect("queue lock");
        let evicted = if st.0.len() >= EXPORT_QUEUE_CAPACITY {
            st.0.pop_front()
        } else {
            None
        };
        st.0.push_back(batch);
        self.cv.notify_one();
        evicted
    }

    fn close(&self) {
        self.state.lock().expect("queue lock").1 = true;
        self.cv.notify_all();
    }

    fn pop(&self) -> Option<Vec<MetricSample>> {
        let mut st = self.state.lock().expect("queue lock");
        loop {
            if let Some(b) = st.0.pop_front() {
                return Some(b);
            }
            if st.1 {
                return None;
            }
            st = self.cv.wait(st).expect("queue lock");
        }
    }
}

/// Samples until stopped or the job's cgroup disappears, exporting batches
/// from a separate thread through a bounded drop-oldest queue.
pub fn run_monitoring(
    cfg: AgentConfig,
    stop: &StopSignal,
    clock: &dyn Clock,
    pacer: &dyn Pacer,
    transport: Arc<dyn Transport>,
) -> RunSummary {
    let mut agent = Agent::new(cfg);
    let policy = agent.retry_policy();
    let queue = Arc::new(ExportQueue {
        state: Mutex::new((VecDeque::new(), false)),
        cv: Condvar::new(),
    });
    let export_summary = Arc::new(Mutex::new(RunSummary::new()));
    let exporter = {
        let queue = queue.clone();
        let out = export_summary.clone();
        std::thread::Builder::new()
            .name("scitrace-exporter".into())
            .spawn(move || {
                while let Some(batch) = queue.pop() {
                    let n = batch.len();
                    let result = export_batch(&ExportBatch::Metrics(batch), &*transport, &policy, &|d| {
                        std::thread::sleep(d)
                    });
                    out.lock().expect("summary lock").record_export(n, &result);
                }
            })
            .expect("spawning exporter")
    };

    let interval = agent.config().sample_interval;
    let mut overflow = Vec::new();
    let mut enqueue = |batch: Vec<MetricSample>| {
        if let Some(old) = queue.push(batch) {
            warn!(records = old.len(), "export queue full, dropping oldest batch");
            overflow.push(old.len());
        }
    };
    loop {
        if stop.is_stopped() {
            break;
        }
        if agent.tick(clock) == Tick::JobEnded {
            info!(job = agent.config().job.job_id, "job cgroup gone, stopping");
            break;
        }
        while let Some(b) = agent.take_batch(false) {
            enqueue(b);
        }
        if pacer.wait(interval, stop) {
            break;
        }
    }
    if let Some(b) = agent.take_batch(true) {
        enqueue(b);
    }
    queue.close();
    let _ = exporter.join();

    let mut summary = agent.summary.clone();
    let exported = export_summary.lock().expect("summary lock").clone();
    summary.batches_exported = exported.batches_exported;
    summary.batches_dropped = exported.batches_dropped;
    summary.records_dropped = exported.records_dropped;
    summary.export_attempts = exported.export_attempts;
    summary.warnings.extend(exported.warnings);
    for n in overflow {
        summary.batches_dropped += 1;
        summary.records_dropped += n as u64;
        summary.warnings.push(AgentWarning::QueueOverflow { records: n });
    }
    info!(
        rounds = summary.rounds,
        skipped = summary.skipped,
        exported = summary.batches_exported,
        dropped = summary.batches_dropped,
        "monitoring finished"
    );
    summary
}

#[cfg(test)]
mod tests;
