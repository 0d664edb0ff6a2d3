use std::path::PathBuf;
use std::time::Duration;

use tracing::warn;

use crate::cgroup::{DEFAULT_CGROUP_ROOT, DEFAULT_PROC_ROOT, DEFAULT_V2_PATTERN};
use crate::env::Environment;
use crate::model::{JobIdentity, TagError, TagSet, TraceId};
use crate::trace::{parse_traceparent, TRACEPARENT_ENV};

pub const DEFAULT_ENDPOINT: &str = "http://127.0.0.1:4318";
pub const ENDPOINT_ENV: &str = "SCITRACE_ENDPOINT";
pub const JOB_ID_ENV: &str = "SLURM_JOB_ID";
pub const ARRAY_TASK_ID_ENV: &str = "SLURM_ARRAY_TASK_ID";
pub const UID_ENVS: [&str; 2] = ["UID", "SLURM_JOB_UID"];
pub const HOSTNAME_ENVS: [&str; 2] = ["HOSTNAME", "SLURMD_NODENAME"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgentConfigError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("no job id: set {JOB_ID_ENV} or pass --job-id")]
    MissingJob,
    #[error("cannot determine {0}")]
    MissingIdentity(&'static str),
    #[error("invalid value for {flag}: {reason}")]
    InvalidValue { flag: String, reason: String },
    #[error(transparent)]
    Tag(#[from] TagError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub sample_interval: Duration,
    pub batch_max_samples: usize,
    pub export_endpoint: String,
    pub tags: TagSet,
    pub job: JobIdentity,
    pub cgroup_root: PathBuf,
    pub proc_root: PathBuf,
    pub max_retry: u32,
    pub backoff_base: Duration,
    /// Trace the job belongs to, from an inherited `TRACEPARENT`.
    pub trace_id: Option<TraceId>,
    pub v2_pattern: String,
}

impl AgentConfig {
    pub fn new(job: JobIdentity) -> Self {
        Self {
            sample_interval: Duration::from_secs(5),
            batch_max_samples: 60,
            export_endpoint: DEFAULT_ENDPOINT.to_owned(),
            tags: TagSet::default(),
            job,
            cgroup_root: PathBuf::from(DEFAULT_CGROUP_ROOT),
            proc_root: PathBuf::from(DEFAULT_PROC_ROOT),
            max_retry: 5,
            backoff_base: Duration::from_secs(1),
            trace_id: None,
            v2_pattern: DEFAULT_V2_PATTERN.to_owned(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentConfigError> {
        let invalid = |flag: &str, reason: &str| AgentConfigError::InvalidValue {
            flag: flag.to_owned(),
            reason: reason.to_owned(),
        };
        if self.sample_interval.is_zero() {
            return Err(invalid("--interval", "must be positive"));
        }
        if self.batch_max_samples == 0 {
            return Err(invalid("--batch-max-samples", "must be at least 1"));
        }
        if self.export_endpoint.is_empty() {
            return Err(invalid("--endpoint", "must not be empty"));
        }
        Ok(())
    }
}

fn process_uid() -> Option<u32> {
    use std::os::unix::fs::MetadataExt;
    std::fs::metadata("/proc/self").ok().map(|m| m.uid())
}

fn system_hostname() -> Option<String> {
    ["/proc/sys/kernel/hostname", "/etc/hostname"]
        .iter()
        .filter_map(|p| std::fs::read_to_string(p).ok())
        .map(|s| s.trim().to_owned())
        .find(|s| !s.is_empty())
}

fn parse_num<T: std::str::FromStr>(flag: &str, v: &str) -> Result<T, AgentConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| AgentConfigError::InvalidValue {
        flag: flag.to_owned(),
        reason: e.to_string(),
    })
}

fn parse_duration(flag: &str, v: &str) -> Result<Duration, AgentConfigError> {
    humantime::parse_duration(v).map_err(|e| AgentConfigError::InvalidValue {
        flag: flag.to_owned(),
        reason: e.to_string(),
    })
}

/// Builds the agent configuration from `--key value` pairs and the
/// environment. Option flags configure the agent; every other flag becomes a
/// tag after key normalization (`--case-number 7` is tag `case_number=7`).
pub fn parse_monitoring_args<S: AsRef<str>>(
    argv: &[S],
    env: &dyn Environment,
) -> Result<AgentConfig, AgentConfigError> {
    let mut pairs = Vec::new();
    let mut it = argv.iter().map(AsRef::as_ref);
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| !f.is_empty()) else {
            return Err(AgentConfigError::Usage(format!("expected --flag, found {arg:?}")));
        };
        let (flag, value) = match flag.split_once('=') {
            Some((f, v)) => (f.to_owned(), v.to_owned()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| AgentConfigError::Usage(format!("--{flag} needs a value")))?;
                (flag.to_owned(), v.to_owned())
            }
        };
        pairs.push((flag, value));
    }

    let mut interval = None;
    let mut endpoint = None;
    let mut cgroup_root = None;
    let mut proc_root = None;
    let mut job_id = None;
    let mut uid = None;
    let mut hostname = None;
    let mut array_task = None;
    let mut batch_max = None;
    let mut max_retry = None;
    let mut backoff = None;
    let mut v2_pattern = None;
    let mut tags = TagSet::default();
    for (flag, value) in pairs {
        let f = format!("--{flag}");
        match flag.as_str() {
            "interval" => interval = Some(parse_duration(&f, &value)?),
            "endpoint" => endpoint = Some(value),
            "cgroup-root" => cgroup_root = Some(PathBuf::from(value)),
            "proc-root" => proc_root = Some(PathBuf::from(value)),
            "job-id" => job_id = Some(parse_num::<u64>(&f, &value)?),
            "uid" => uid = Some(parse_num::<u32>(&f, &value)?),
            "hostname" => hostname = Some(value),
            "array-task-id" => array_task = Some(parse_num::<u64>(&f, &value)?),
            "batch-max-samples" => batch_max = Some(parse_num::<usize>(&f, &value)?),
            "max-retry" => max_retry = Some(parse_num::<u32>(&f, &value)?),
            "backoff-base" => backoff = Some(parse_duration(&f, &value)?),
            "v2-pattern" => v2_pattern = Some(value),
            _ => {
                tags.insert(&f, value)?;
            }
        }
    }

    let job_id = match job_id {
        Some(j) => j,
        None => {
            let raw = env.var(JOB_ID_ENV).ok_or(AgentConfigError::MissingJob)?;
            parse_num::<u64>(JOB_ID_ENV, raw.trim())?
        }
    };
    let uid = match uid {
        Some(u) => u,
        None => match UID_ENVS.iter().find_map(|k| env.var(k)) {
            Some(raw) => parse_num::<u32>("UID", raw.trim())?,
            None => process_uid().ok_or(AgentConfigError::MissingIdentity("uid"))?,
        },
    };
    let hostname = hostname
        .or_else(|| HOSTNAME_ENVS.iter().find_map(|k| env.var(k)))
        .or_else(system_hostname)
        .filter(|h| !h.is_empty())
        .ok_or(AgentConfigError::MissingIdentity("hostname"))?;
    let array_task = match array_task {
        Some(t) => Some(t),
        None => env
            .var(ARRAY_TASK_ID_ENV)
            .map(|raw| parse_num::<u64>(ARRAY_TASK_ID_ENV, raw.trim()))
            .transpose()?,
    };
    let job = JobIdentity::new(uid, job_id, array_task, hostname)
        .ok_or(AgentConfigError::MissingIdentity("hostname"))?;

    let mut cfg = AgentConfig::new(job);
    cfg.tags = tags;
    if let Some(v) = interval {
        cfg.sample_interval = v;
    }
    if let Some(v) = endpoint.or_else(|| env.var(ENDPOINT_ENV)) {
        cfg.export_endpoint = v;
    }
    if let Some(v) = cgroup_root {
        cfg.cgroup_root = v;
    }
    if let Some(v) = proc_root {
        cfg.proc_root = v;
    }
    if let Some(v) = batch_max {
        cfg.batch_max_samples = v;
    }
    if let Some(v) = max_retry {
        cfg.max_retry = v;
    }
    if let Some(v) = backoff {
        cfg.backoff_base = v;
    }
    if let Some(v) = v2_pattern {
        cfg.v2_pattern = v;
    }
    if let Some(tp) = env.var(TRACEPARENT_ENV) {
        match parse_traceparent(&tp) {
            Ok(ctx) => cfg.trace_id = Some(ctx.trace_id()),
            Err(e) => warn!(error = %e, "ignoring malformed {TRACEPARENT_ENV}"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
