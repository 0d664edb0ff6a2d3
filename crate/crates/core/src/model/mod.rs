//! Telemetry data model shared by every component.

mod ids;
mod metric;
mod tags;
pub mod wire;

use serde::{Deserialize, Serialize};

pub(crate) use ids::decode_lower_hex as ids_decode;
pub use ids::{IdError, SpanId, TraceContext, TraceFlags, TraceId};
pub use metric::{
    names, MetricDescriptor, MetricKind, MetricRegistry, MetricSample, MetricValue, RegistryError,
    STANDARD_METRICS,
};
pub use tags::{
    is_reserved, normalize_tag_key, TagError, TagSet, CASE_NUMBER, PIPELINE_IDENTIFIER,
    PIPELINE_NAME, RESERVED_KEYS, STEP_NAME,
};

/// Identity of one monitored job instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobIdentity {
    pub uid: u32,
    pub job_id: u64,
    pub array_task_id: Option<u64>,
    pub hostname: String,
}

impl JobIdentity {
    pub fn new(uid: u32, job_id: u64, array_task_id: Option<u64>, hostname: impl Into<String>) -> Option<Self> {
        let hostname = hostname.into();
        if hostname.is_empty() {
            return None;
        }
        Some(Self {
            uid,
            job_id,
            array_task_id,
            hostname,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Pipeline,
    Job,
    Task,
    Custom,
}

impl SpanKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SpanKind::Pipeline => "pipeline",
            SpanKind::Job => "job",
            SpanKind::Task => "task",
            SpanKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pipeline" => Some(SpanKind::Pipeline),
            "job" => Some(SpanKind::Job),
            "task" => Some(SpanKind::Task),
            "custom" => Some(SpanKind::Custom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanStatus {
    Ok,
    Error,
    #[default]
    Unset,
}

impl SpanStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SpanStatus::Ok => "ok",
            SpanStatus::Error => "error",
            SpanStatus::Unset => "unset",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(SpanStatus::Ok),
            "error" => Some(SpanStatus::Error),
            "unset" => Some(SpanStatus::Unset),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpanError {
    #[error("span name is empty")]
    EmptyName,
    #[error("span ends at {end} before it starts at {start}")]
    EndBeforeStart { start: u64, end: u64 },
    #[error("span {0} lists itself as parent")]
    SelfParent(SpanId),
}

/// A named timed interval within a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub name: String,
    pub context: TraceContext,
    pub parent_span_id: Option<SpanId>,
    pub start_unix_nano: u64,
    pub end_unix_nano: Option<u64>,
    pub kind: SpanKind,
    pub attributes: TagSet,
    pub status: SpanStatus,
    /// Job the span ran in, if any. Carried as resource attributes on the wire.
    #[serde(default)]
    pub job: Option<JobIdentity>,
}

impl Span {
    pub fn validate(&self) -> Result<(), SpanError> {
        if self.name.is_empty() {
            return Err(SpanError::EmptyName);
        }
        if let Some(end) = self.end_unix_nano {
            if end < self.start_unix_nano {
                return Err(SpanError::EndBeforeStart {
                    start: self.start_unix_nano,
                    end,
                });
            }
        }
        if self.parent_span_id == Some(self.context.span_id()) {
            return Err(SpanError::SelfParent(self.context.span_id()));
        }
        Ok(())
    }

    pub fn is_closed(&self) -> bool {
        self.end_unix_nano.is_some()
    }

    pub fn duration_nanos(&self) -> Option<u64> {
        self.end_unix_nano.map(|e| e - self.start_unix_nano)
    }
}

/// One raw read of a job's cgroup counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CgroupSnapshot {
    pub taken_unix_nano: u64,
    pub rss_bytes: u64,
    pub cache_bytes: u64,
    pub memory_current_bytes: u64,
    pub cpu_usage_ns_cumulative: u64,
    pub pid_count: u64,
    pub open_files: u64,
}

impl CgroupSnapshot {
    /// Equality ignoring the timestamp.
    pub fn same_counters(&self, other: &CgroupSnapshot) -> bool {
        CgroupSnapshot {
            taken_unix_nano: 0,
            ..*self
        } == CgroupSnapshot {
            taken_unix_nano: 0,
            ..*other
        }
    }
}
