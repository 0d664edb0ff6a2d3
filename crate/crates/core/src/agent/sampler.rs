use serde::Serialize;

use super::config::AgentConfig;
use crate::cgroup::{self, CgroupError, CgroupLayout};
use crate::clock::Clock;
use crate::model::{names, CgroupSnapshot, MetricKind, MetricSample, MetricValue};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentWarning {
    SnapshotFailed { at_unix_nano: u64, error: String },
    CpuRegression { at_unix_nano: u64, previous: u64, current: u64 },
    ExportFailed { records: usize, error: String },
    QueueOverflow { records: usize },
}

/// Result of one sampling round.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleOutcome {
    Sampled {
        samples: Vec<MetricSample>,
        warning: Option<AgentWarning>,
    },
    Skipped(AgentWarning),
    /// The job's cgroup directory is gone.
    JobEnded,
}

/// Turns a snapshot into metric samples. `cpu_time` is the already re-based
/// cumulative value; `utilization` is omitted when `None`.
pub fn derive_samples(
    cfg: &AgentConfig,
    snap: &CgroupSnapshot,
    cpu_time: u64,
    utilization: Option<f64>,
) -> Vec<MetricSample> {
    let mk = |name: &str, unit: &str, kind: MetricKind, value: MetricValue| MetricSample {
        name: name.to_owned(),
        unit: unit.to_owned(),
        time_unix_nano: snap.taken_unix_nano,
        value,
        kind,
        job: cfg.job.clone(),
        tags: cfg.tags.clone(),
        trace_id: cfg.trace_id,
    };
    let int = |v: u64| MetricValue::Int(i64::try_from(v).unwrap_or(i64::MAX));
    let mut out = vec![
        mk(names::MEMORY_RSS, "By", MetricKind::Gauge, int(snap.rss_bytes)),
        mk(names::MEMORY_CACHE, "By", MetricKind::Gauge, int(snap.cache_bytes)),
        mk(names::MEMORY_CURRENT, "By", MetricKind::Gauge, int(snap.memory_current_bytes)),
        mk(names::OPEN_FILES, "1", MetricKind::Gauge, int(snap.open_files)),
        mk(names::PIDS, "1", MetricKind::Gauge, int(snap.pid_count)),
        mk(names::CPU_TIME, "ns", MetricKind::CumulativeCounter, int(cpu_time)),
    ];
    if let Some(u) = utilization {
        out.push(mk(names::CPU_UTILIZATION, "1", MetricKind::Gauge, MetricValue::Double(u)));
    }
    out
}

/// Per-job sampling state across rounds.
#[derive(Debug, Clone)]
pub struct Sampler {
    cfg: AgentConfig,
    layout: Option<CgroupLayout>,
    prev: Option<CgroupSnapshot>,
    /// Added to the raw counter so the exported stream never decreases.
    cpu_offset: u64,
}

impl Sampler {
    pub fn new(cfg: AgentConfig) -> Self {
        Self {
            cfg,
            layout: None,
            prev: None,
            cpu_offset: 0,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn previous(&self) -> Option<&CgroupSnapshot> {
        self.prev.as_ref()
    }

    pub fn sample(&mut self, clock: &dyn Clock) -> SampleOutcome {
        let layout = match &self.layout {
            Some(l) if l.is_live() => l.clone(),
            Some(_) => return SampleOutcome::JobEnded,
            None => match cgroup::resolve_layout_with(
                &self.cfg.cgroup_root,
                self.cfg.job.uid,
                self.cfg.job.job_id,
                &self.cfg.v2_pattern,
            ) {
                Ok(l) => {
                    self.layout = Some(l.clone());
                    l
                }
                Err(e) => {
                    return SampleOutcome::Skipped(AgentWarning::SnapshotFailed {
                        at_unix_nano: clock.now_unix_nano(),
                        error: e.to_string(),
                    })
                }
            },
        };
        match sample_once(&self.cfg, &layout, self.prev.as_ref(), self.cpu_offset, clock) {
            Ok(round) => {
                self.prev = Some(round.snapshot);
                self.cpu_offset = round.cpu_offset;
                if let Some(w) = &round.regression {
                    tracing::warn!(?w, "cpu counter regression, re-basing");
                }
                SampleOutcome::Sampled {
                    samples: round.samples,
                    warning: round.regression,
                }
            }
            Err(e) if !layout.is_live() => {
                tracing::debug!(error = %e, "cgroup vanished during sampling");
                SampleOutcome::JobEnded
            }
            Err(e) => SampleOutcome::Skipped(AgentWarning::SnapshotFailed {
                at_unix_nano: clock.now_unix_nano(),
                error: e.to_string(),
            }),
        }
    }
}

/// One successful sampling round.
#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub snapshot: CgroupSnapshot,
    pub samples: Vec<MetricSample>,
    pub cpu_offset: u64,
    pub regression: Option<AgentWarning>,
}

/// Reads one snapshot and derives its samples. Utilization is emitted only
/// when a previous snapshot exists and the raw counter did not go backwards; a
/// regression bumps the offset by the previous raw value.
pub fn sample_once(
    cfg: &AgentConfig,
    layout: &CgroupLayout,
    prev: Option<&CgroupSnapshot>,
    cpu_offset: u64,
    clock: &dyn Clock,
) -> Result<Round, CgroupError> {
    let snap = cgroup::snapshot(layout, &cfg.proc_root, clock)?;
    let mut offset = cpu_offset;
    let mut regression = None;
    let mut utilization = None;
    if let Some(p) = prev {
        if snap.cpu_usage_ns_cumulative < p.cpu_usage_ns_cumulative {
            offset = offset.saturating_add(p.cpu_usage_ns_cumulative);
            regression = Some(AgentWarning::CpuRegression {
                at_unix_nano: snap.taken_unix_nano,
                previous: p.cpu_usage_ns_cumulative,
                current: snap.cpu_usage_ns_cumulative,
            });
        } else if snap.taken_unix_nano > p.taken_unix_nano {
            let dcpu = (snap.cpu_usage_ns_cumulative - p.cpu_usage_ns_cumulative) as f64;
            let dt = (snap.taken_unix_nano - p.taken_unix_nano) as f64;
            utilization = Some(dcpu / dt);
        }
    }
    let samples = derive_samples(cfg, &snap, snap.cpu_usage_ns_cumulative.saturating_add(offset), utilization);
    Ok(Round {
        snapshot: snap,
        samples,
        cpu_offset: offset,
        regression,
    })
}
