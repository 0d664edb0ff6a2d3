//! Synthetic job fleets with ground truth.
//!
//! A [`ScenarioSpec`] is expanded into a [`GroundTruthLedger`] up front: the
//! schedule, every counter value the fixture writer will put on disk, and the
//! span ids the trace layer will issue. The run then drives real agents and a
//! real collector against fixture cgroup trees under a simulated clock, and
//! [`oracle_check`] compares what came out against the ledger and against
//! brute-force scans of the raw store.

mod fixtures;
mod oracle;
mod run;

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use fixtures::{generate_fixture_tree, FixtureWriter};
pub use oracle::{oracle_check, Diff, OracleVerdict};
pub use run::{run_scenario, Analyses, ComponentFailure, Payload, ScenarioReport, ScenarioRun};

use crate::cgroup::CgroupVersion;
use crate::model::{JobIdentity, SpanId, TraceContext, TraceId};
use crate::trace::{child_context, new_trace};

pub const DEFAULT_START_UNIX_NANO: u64 = 1_700_000_000_000_000_000;
pub const RSS_METRIC: &str = crate::model::names::MEMORY_RSS;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("fixture tree {path}: {source}")]
    Fixture {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("reading scenario spec: {0}")]
    Spec(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScenarioFaults {
    /// Ingest calls answered 503 before the collector recovers.
    #[serde(default)]
    pub collector_outage_attempts: u32,
    /// Indices (in export order) of metric batches the harness discards.
    #[serde(default)]
    pub drop_batches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub job_count: usize,
    pub concurrency_cap: usize,
    /// Job duration range in seconds.
    pub duration_dist: (f64, f64),
    /// Memory plateau range in bytes.
    pub memory_plateau_dist: (f64, f64),
    pub cpu_cores: f64,
    #[serde(with = "crate::clock::duration_str")]
    pub sample_interval: Duration,
    /// `(job index, duration seconds)` overrides.
    #[serde(default)]
    pub planted_outliers: Vec<(usize, f64)>,
    pub seed: u64,
    #[serde(default = "default_tasks")]
    pub tasks_per_job: usize,
    #[serde(default = "default_pipeline_name")]
    pub pipeline_name: String,
    #[serde(default = "default_version")]
    pub cgroup_version: CgroupVersion,
    #[serde(default = "default_start")]
    pub start_unix_nano: u64,
    #[serde(default)]
    pub faults: ScenarioFaults,
}

fn default_tasks() -> usize {
    2
}

fn default_pipeline_name() -> String {
    "pipeline".into()
}

fn default_version() -> CgroupVersion {
    CgroupVersion::V1
}

fn default_start() -> u64 {
    DEFAULT_START_UNIX_NANO
}

impl ScenarioSpec {
    pub fn new(job_count: usize, concurrency_cap: usize, seed: u64) -> Self {
        Self {
            job_count,
            concurrency_cap,
            duration_dist: (10.0, 20.0),
            memory_plateau_dist: (1e9, 2e9),
            cpu_cores: 1.0,
            sample_interval: Duration::from_secs(1),
            planted_outliers: Vec::new(),
            seed,
            tasks_per_job: default_tasks(),
            pipeline_name: default_pipeline_name(),
            cgroup_version: default_version(),
            start_unix_nano: DEFAULT_START_UNIX_NANO,
            faults: ScenarioFaults::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn interval_nanos(&self) -> u64 {
        self.sample_interval.as_nanos() as u64
    }

    /// Fleet jobs must last at least three intervals so the memory plateau
    /// spans three samples. Planted outliers may be shorter; their plateau
    /// then covers their whole life.
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi;
        if self.concurrency_cap == 0 {
            return bad("concurrency_cap must be at least 1".into());
        }
        if self.sample_interval.is_zero() {
            return bad("sample_interval must be positive".into());
        }
        if !range_ok(self.duration_dist) || !range_ok(self.memory_plateau_dist) {
            return bad("distributions need 0 <= low <= high".into());
        }
        if self.duration_dist.0 < 3.0 * self.sample_interval.as_secs_f64() {
            return bad("duration_dist low must cover at least 3 sample intervals".into());
        }
        if self.memory_plateau_dist.1 >= 2f64.powi(53) {
            return bad("memory plateau beyond exact float range".into());
        }
        if !(self.cpu_cores.is_finite() && self.cpu_cores > 0.0) {
            return bad("cpu_cores must be positive".into());
        }
        if self.tasks_per_job == 0 {
            return bad("tasks_per_job must be at least 1".into());
        }
        for (idx, secs) in &self.planted_outliers {
            if *idx >= self.job_count {
                return bad(format!("planted outlier index {idx} out of range"));
            }
            if !(secs.is_finite() && *secs >= self.sample_interval.as_secs_f64()) {
                return bad(format!("planted outlier {idx} must last at least one interval"));
            }
        }
        Ok(())
    }
}

/// Counter values for one sampling tick of one job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSample {
    pub time_unix_nano: u64,
    pub rss_bytes: u64,
    pub cache_bytes: u64,
    pub memory_current_bytes: u64,
    pub cpu_ns: u64,
    pub pids: u64,
    pub open_files: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerTask {
    pub span_id: SpanId,
    pub start_tick: u64,
    pub end_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerJob {
    pub index: usize,
    pub job: JobIdentity,
    pub planted: bool,
    pub start_tick: u64,
    /// Duration in ticks; the job samples at ticks `start_tick..start_tick + ticks`.
    pub ticks: u64,
    pub start_unix_nano: u64,
    pub end_unix_nano: u64,
    pub planned_duration_nanos: u64,
    pub planned_max_memory: u64,
    pub cpu_cores: f64,
    pub first_pid: u32,
    pub job_span_id: SpanId,
    /// Seed for the RNG the trace layer uses for this job's spans.
    pub span_seed: u64,
    pub tasks: Vec<LedgerTask>,
    pub samples: Vec<LedgerSample>,
}

impl LedgerJob {
    pub fn end_tick(&self) -> u64 {
        self.start_tick + self.ticks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLedger {
    pub seed: u64,
    pub start_unix_nano: u64,
    pub interval_nanos: u64,
    pub total_ticks: u64,
    pub trace_id: TraceId,
    pub pipeline_span_id: SpanId,
    pub pipeline_span_seed: u64,
    pub jobs: Vec<LedgerJob>,
}

impl GroundTruthLedger {
    pub fn tick_time(&self, tick: u64) -> u64 {
        self.start_unix_nano + tick * self.interval_nanos
    }

    pub fn end_unix_nano(&self) -> u64 {
        self.tick_time(self.total_ticks)
    }

    /// Largest number of jobs running at any tick.
    pub fn peak_concurrency(&self) -> usize {
        (0..self.total_ticks)
            .map(|t| self.jobs.iter().filter(|j| j.start_tick <= t && t < j.end_tick()).count())
            .max()
            .unwrap_or(0)
    }
}

fn sub_seed(seed: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.random()
}

/// Memory at sample `k` of `n`: ramp up, plateau over the middle, ramp down.
/// The plateau lasts `max(3, 0.6 n)` samples (all of them for short jobs), and
/// every ramp value is strictly below the peak.
pub fn memory_profile(peak: u64, k: u64, n: u64) -> u64 {
    let plateau = ((n as f64 * 0.6).round() as u64).max(3).min(n);
    let up = (n - plateau) / 2;
    let down = n - plateau - up;
    if k < up {
        (peak as u128 * (k + 1) as u128 / (up + 1) as u128) as u64
    } else if k < up + plateau {
        peak
    } else {
        (peak as u128 * (n - k) as u128 / (down + 1) as u128) as u64
    }
}

/// Expands a spec into the full schedule and counter history.
pub fn plan(spec: &ScenarioSpec) -> Result<GroundTruthLedger, SimError> {
    spec.validate()?;
    let interval = spec.interval_nanos();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let to_ticks = |secs: f64| ((secs * 1e9 / interval as f64).round() as u64).max(1);

    let pipeline_span_seed = sub_seed(spec.seed, u64::MAX);
    let pipeline: TraceContext = new_trace(&mut ChaCha8Rng::seed_from_u64(pipeline_span_seed));

    struct Draw {
        ticks: u64,
        peak: u64,
        planted: bool,
    }
    let draws: Vec<Draw> = (0..spec.job_count)
        .map(|i| {
            let (dlo, dhi) = spec.duration_dist;
            let secs = if dlo == dhi { dlo } else { rng.random_range(dlo..=dhi) };
            let (mlo, mhi) = spec.memory_plateau_dist;
            let peak = if mlo == mhi { mlo } else { rng.random_range(mlo..=mhi) };
            let planted = spec.planted_outliers.iter().find(|(idx, _)| *idx == i);
            Draw {
                ticks: to_ticks(planted.map_or(secs, |p| p.1)),
                peak: peak.floor() as u64,
                planted: planted.is_some(),
            }
        })
        .collect();

    // Jobs start in index order whenever a slot is free.
    let mut starts = vec![0u64; spec.job_count];
    let mut running: Vec<u64> = Vec::new();
    let mut t = 0u64;
    for (i, d) in draws.iter().enumerate() {
        loop {
            running.retain(|end| *end > t);
            if running.len() < spec.concurrency_cap {
                break;
            }
            t = *running.iter().min().expect("cap reached");
        }
        starts[i] = t;
        running.push(t + d.ticks);
    }
    let total_ticks = draws.iter().zip(&starts).map(|(d, s)| s + d.ticks).max().unwrap_or(0);

    let jobs = draws
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let span_seed = sub_seed(spec.seed, i as u64);
            let mut span_rng = ChaCha8Rng::seed_from_u64(span_seed);
            let job_ctx = child_context(&pipeline, &mut span_rng);
            let m = (spec.tasks_per_job as u64).min(d.ticks);
            let tasks = (0..m)
                .map(|k| LedgerTask {
                    span_id: child_context(&job_ctx, &mut span_rng).span_id(),
                    start_tick: starts[i] + k * d.ticks / m,
                    end_tick: starts[i] + (k + 1) * d.ticks / m,
                })
                .collect();
            let pids = 1 + (i as u64 % 3);
            let samples = (0..d.ticks)
                .map(|k| {
                    let rss = memory_profile(d.peak, k, d.ticks);
                    let cache = rss / 8;
                    let elapsed = k * interval;
                    let cpu_ns = match spec.cgroup_version {
                        CgroupVersion::V1 => (spec.cpu_cores * elapsed as f64).round() as u64,
                        CgroupVersion::V2 => (spec.cpu_cores * elapsed as f64 / 1e3).round() as u64 * 1000,
                    };
                    LedgerSample {
                        time_unix_nano: spec.start_unix_nano + (starts[i] + k) * interval,
                        rss_bytes: rss,
                        cache_bytes: cache,
                        memory_current_bytes: rss + cache,
                        cpu_ns,
                        pids,
                        open_files: pids * (3 + i as u64 % 4),
                    }
                })
                .collect();
            let start_unix_nano = spec.start_unix_nano + starts[i] * interval;
            LedgerJob {
                index: i,
                job: JobIdentity {
                    uid: 1000,
                    job_id: 5_000_000 + i as u64,
                    array_task_id: Some(i as u64),
                    hostname: format!("node{:03}", i % 16),
                },
                planted: d.planted,
                start_tick: starts[i],
                ticks: d.ticks,
                start_unix_nano,
                end_unix_nano: start_unix_nano + d.ticks * interval,
                planned_duration_nanos: d.ticks * interval,
                planned_max_memory: d.peak,
                cpu_cores: spec.cpu_cores,
                first_pid: 100_000 + 8 * i as u32,
                job_span_id: job_ctx.span_id(),
                span_seed,
                tasks,
                samples,
            }
        })
        .collect();

    Ok(GroundTruthLedger {
        seed: spec.seed,
        start_unix_nano: spec.start_unix_nano,
        interval_nanos: interval,
        total_ticks,
        trace_id: pipeline.trace_id(),
        pipeline_span_id: pipeline.span_id(),
        pipeline_span_seed,
        jobs,
    })
}

#[cfg(test)]
mod tests;
