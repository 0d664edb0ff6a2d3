//! Per-job cgroup counters, read from v1 or v2 hierarchies.
//!
//! All paths hang off a configurable root so fixture trees can stand in for
//! `/sys/fs/cgroup` and `/proc`.

use std::collections::BTreeSet;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::model::CgroupSnapshot;

pub const DEFAULT_CGROUP_ROOT: &str = "/sys/fs/cgroup";
pub const DEFAULT_PROC_ROOT: &str = "/proc";
/// Default v2 job directory, relative to the cgroup root.
pub const DEFAULT_V2_PATTERN: &str = "system.slice/slurmstepd.scope/job_{job}";

const CGROUP_CONTROLLERS: &str = "cgroup.controllers";
const CGROUP_PROCS: &str = "cgroup.procs";
const MEMORY_STAT: &str = "memory.stat";
const MEMORY_USAGE_V1: &str = "memory.usage_in_bytes";
const MEMORY_CURRENT_V2: &str = "memory.current";
const CPUACCT_USAGE_V1: &str = "cpuacct.usage";
const CPU_STAT_V2: &str = "cpu.stat";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CgroupVersion {
    V1,
    V2,
}

#[derive(Debug, thiserror::Error)]
pub enum CgroupError {
    #[error("no cgroup directory for uid {uid} job {job_id} under {root}")]
    NotFound { root: PathBuf, uid: u32, job_id: u64 },
    #[error("permission denied reading {path}")]
    Permission { path: PathBuf },
    #[error("missing cgroup file {path}")]
    MissingFile { path: PathBuf },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed {path}{}: {reason}", line.as_ref().map(|(n, l)| format!(" line {n} {l:?}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        /// 1-based line number and its content, when a specific line is at fault.
        line: Option<(usize, String)>,
        reason: String,
    },
    #[error("job {job}: {source}")]
    Job {
        job: String,
        #[source]
        source: Box<CgroupError>,
    },
}

impl CgroupError {
    fn from_io(path: &Path, err: io::Error) -> Self {
        match err.kind() {
            io::ErrorKind::NotFound => CgroupError::MissingFile { path: path.to_owned() },
            io::ErrorKind::PermissionDenied => CgroupError::Permission { path: path.to_owned() },
            _ => CgroupError::Io {
                path: path.to_owned(),
                source: err,
            },
        }
    }

    /// Strips any job annotation.
    pub fn root_cause(&self) -> &CgroupError {
        match self {
            CgroupError::Job { source, .. } => source.root_cause(),
            other => other,
        }
    }

    pub fn is_parse(&self) -> bool {
        matches!(self.root_cause(), CgroupError::Parse { .. })
    }
}

/// Resolved cgroup directories for one job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CgroupLayout {
    pub version: CgroupVersion,
    pub root: PathBuf,
    pub memory_path: PathBuf,
    pub cpu_path: PathBuf,
    pub procs_file: PathBuf,
    pub uid: u32,
    pub job_id: u64,
}

impl fmt::Display for CgroupLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "uid_{}/job_{}", self.uid, self.job_id)
    }
}

impl CgroupLayout {
    /// True while the job's cgroup directory exists.
    pub fn is_live(&self) -> bool {
        self.memory_path.is_dir()
    }
}

/// v1 memory directory for a job, relative to the root.
pub fn v1_memory_dir(uid: u32, job_id: u64) -> PathBuf {
    PathBuf::from(format!("memory/slurm/uid_{uid}/job_{job_id}"))
}

/// v1 cpu accounting directory for a job, relative to the root.
pub fn v1_cpu_dir(uid: u32, job_id: u64) -> PathBuf {
    PathBuf::from(format!("cpu,cpuacct/slurm/uid_{uid}/job_{job_id}"))
}

pub fn v2_job_dir(pattern: &str, uid: u32, job_id: u64) -> PathBuf {
    PathBuf::from(
        pattern
            .replace("{uid}", &uid.to_string())
            .replace("{job}", &job_id.to_string()),
    )
}

fn dir_exists(path: &Path) -> Result<bool, CgroupError> {
    match std::fs::metadata(path) {
        Ok(m) => Ok(m.is_dir()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
        Err(e) if e.kind() == io::ErrorKind::PermissionDenied => {
            Err(CgroupError::Permission { path: path.to_owned() })
        }
        Err(e) => Err(CgroupError::Io {
            path: path.to_owned(),
            source: e,
        }),
    }
}

/// Resolves using the default v2 directory pattern.
pub fn resolve_layout(root: &Path, uid: u32, job_id: u64) -> Result<CgroupLayout, CgroupError> {
    resolve_layout_with(root, uid, job_id, DEFAULT_V2_PATTERN)
}

/// Detects the hierarchy version (v2 iff `<root>/cgroup.controllers` exists) and
/// locates the job's directories.
pub fn resolve_layout_with(
    root: &Path,
    uid: u32,
    job_id: u64,
    v2_pattern: &str,
) -> Result<CgroupLayout, CgroupError> {
    let not_found = || CgroupError::NotFound {
        root: root.to_owned(),
        uid,
        job_id,
    };
    if !dir_exists(root)? {
        return Err(not_found());
    }
    if root.join(CGROUP_CONTROLLERS).is_file() {
        let dir = root.join(v2_job_dir(v2_pattern, uid, job_id));
        if !dir_exists(&dir)? {
            return Err(not_found());
        }
        return Ok(CgroupLayout {
            version: CgroupVersion::V2,
            root: root.to_owned(),
            procs_file: dir.join(CGROUP_PROCS),
            memory_path: dir.clone(),
            cpu_path: dir,
            uid,
            job_id,
        });
    }
    let memory_path = root.join(v1_memory_dir(uid, job_id));
    let cpu_path = root.join(v1_cpu_dir(uid, job_id));
    if !dir_exists(&memory_path)? || !dir_exists(&cpu_path)? {
        return Err(not_found());
    }
    Ok(CgroupLayout {
        version: CgroupVersion::V1,
        root: root.to_owned(),
        procs_file: memory_path.join(CGROUP_PROCS),
        memory_path,
        cpu_path,
        uid,
        job_id,
    })
}

fn read_text(path: &Path) -> Result<String, CgroupError> {
    let bytes = std::fs::read(path).map_err(|e| CgroupError::from_io(path, e))?;
    String::from_utf8(bytes).map_err(|e| CgroupError::Parse {
        path: path.to_owned(),
        line: None,
        reason: format!("not valid UTF-8 at byte {}", e.utf8_error().valid_up_to()),
    })
}

fn parse_u64(path: &Path, line_no: usize, line: &str, token: &str) -> Result<u64, CgroupError> {
    token.parse::<u64>().map_err(|e| CgroupError::Parse {
        path: path.to_owned(),
        line: Some((line_no, line.to_owned())),
        reason: format!("{token:?} is not an unsigned integer ({e})"),
    })
}

/// Reads a file holding a single unsigned integer.
fn read_single_value(path: &Path) -> Result<u64, CgroupError> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((idx, line)) = lines.next() else {
        return Err(CgroupError::Parse {
            path: path.to_owned(),
            line: None,
            reason: "empty file".into(),
        });
    };
    if let Some((extra, l)) = lines.next() {
        return Err(CgroupError::Parse {
            path: path.to_owned(),
            line: Some((extra + 1, l.to_owned())),
            reason: "expected a single value".into(),
        });
    }
    parse_u64(path, idx + 1, line, line.trim())
}

/// Parses a flat-keyed file (`key value` per line) such as `memory.stat`.
fn read_flat_keyed(path: &Path) -> Result<Vec<(String, u64)>, CgroupError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(key), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(CgroupError::Parse {
                path: path.to_owned(),
                line: Some((idx + 1, line.to_owned())),
                reason: "expected `key value`".into(),
            });
        };
        out.push((key.to_owned(), parse_u64(path, idx + 1, line, value)?));
    }
    Ok(out)
}

fn lookup(path: &Path, entries: &[(String, u64)], keys: &[&str]) -> Result<u64, CgroupError> {
    keys.iter()
        .find_map(|k| entries.iter().find(|(e, _)| e == k).map(|(_, v)| *v))
        .ok_or_else(|| CgroupError::Parse {
            path: path.to_owned(),
            line: None,
            reason: format!("missing key {}", keys.join(" or ")),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryCounters {
    pub rss_bytes: u64,
    pub cache_bytes: u64,
    pub memory_current_bytes: u64,
}

/// Reads rss, page cache and total usage for the job.
pub fn read_memory(layout: &CgroupLayout) -> Result<MemoryCounters, CgroupError> {
    let stat_path = layout.memory_path.join(MEMORY_STAT);
    let stat = read_flat_keyed(&stat_path)?;
    match layout.version {
        CgroupVersion::V1 => Ok(MemoryCounters {
            rss_bytes: lookup(&stat_path, &stat, &["total_rss", "rss"])?,
            cache_bytes: lookup(&stat_path, &stat, &["total_cache", "cache"])?,
            memory_current_bytes: read_single_value(&layout.memory_path.join(MEMORY_USAGE_V1))?,
        }),
        CgroupVersion::V2 => Ok(MemoryCounters {
            rss_bytes: lookup(&stat_path, &stat, &["anon"])?,
            cache_bytes: lookup(&stat_path, &stat, &["file"])?,
            memory_current_bytes: read_single_value(&layout.memory_path.join(MEMORY_CURRENT_V2))?,
        }),
    }
}

/// Cumulative CPU time in nanoseconds.
pub fn read_cpu(layout: &CgroupLayout) -> Result<u64, CgroupError> {
    match layout.version {
        CgroupVersion::V1 => read_single_value(&layout.cpu_path.join(CPUACCT_USAGE_V1)),
        CgroupVersion::V2 => {
            let path = layout.cpu_path.join(CPU_STAT_V2);
            let stat = read_flat_keyed(&path)?;
            let usec = lookup(&path, &stat, &["usage_usec"])?;
            usec.checked_mul(1000).ok_or_else(|| CgroupError::Parse {
                path,
                line: None,
                reason: format!("usage_usec {usec} overflows nanoseconds"),
            })
        }
    }
}

/// Pids in the job's `cgroup.procs`, deduplicated and ascending.
pub fn list_procs(layout: &CgroupLayout) -> Result<Vec<u32>, CgroupError> {
    let path = &layout.procs_file;
    let text = read_text(path)?;
    let mut pids = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        let pid = token.parse::<u32>().map_err(|e| CgroupError::Parse {
            path: path.clone(),
            line: Some((idx + 1, line.to_owned())),
            reason: format!("{token:?} is not a pid ({e})"),
        })?;
        pids.insert(pid);
    }
    Ok(pids.into_iter().collect())
}

/// Sums fd-directory entries over `pids`. Processes that have vanished or whose
/// fd directory is unreadable count as zero.
pub fn count_open_files(proc_root: &Path, pids: &[u32]) -> u64 {
    pids.iter()
        .map(|pid| {
            std::fs::read_dir(proc_root.join(pid.to_string()).join("fd"))
                .map(|entries| entries.filter(|e| e.is_ok()).count() as u64)
                .unwrap_or(0)
        })
        .sum()
}

/// Takes one timestamped snapshot of every counter. The timestamp is read
/// before the first file.
pub fn snapshot(layout: &CgroupLayout, proc_root: &Path, clock: &dyn Clock) -> Result<CgroupSnapshot, CgroupError> {
    let taken_unix_nano = clock.now_unix_nano();
    let annotate = |e: CgroupError| CgroupError::Job {
        job: layout.to_string(),
        source: Box::new(e),
    };
    let memory = read_memory(layout).map_err(annotate)?;
    let cpu = read_cpu(layout).map_err(annotate)?;
    let pids = list_procs(layout).map_err(annotate)?;
    let open_files = count_open_files(proc_root, &pids);
    Ok(CgroupSnapshot {
        taken_unix_nano,
        rss_bytes: memory.rss_bytes,
        cache_bytes: memory.cache_bytes,
        memory_current_bytes: memory.memory_current_bytes,
        cpu_usage_ns_cumulative: cpu,
        pid_count: pids.len() as u64,
        open_files,
    })
}
