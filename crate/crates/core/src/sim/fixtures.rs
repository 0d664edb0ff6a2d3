use std::fs;
use std::path::{Path, PathBuf};

use super::{plan, GroundTruthLedger, LedgerJob, LedgerSample, ScenarioSpec, SimError};
use crate::cgroup::{v1_cpu_dir, v1_memory_dir, v2_job_dir, CgroupVersion, DEFAULT_V2_PATTERN};

/// Writes cgroup counter files and `/proc/<pid>/fd` entries for ledger jobs.
#[derive(Debug, Clone)]
pub struct FixtureWriter {
    pub cgroup_root: PathBuf,
    pub proc_root: PathBuf,
    pub version: CgroupVersion,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Fixture {
        path: path.to_owned(),
        source,
    }
}

fn write(path: &Path, contents: &str) -> Result<(), SimError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn mkdir(path: &Path) -> Result<(), SimError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

impl FixtureWriter {
    pub fn new(root: &Path, version: CgroupVersion) -> Self {
        Self {
            cgroup_root: root.join("cgroup"),
            proc_root: root.join("proc"),
            version,
        }
    }

    fn job_dirs(&self, job: &LedgerJob) -> Vec<PathBuf> {
        let (uid, id) = (job.job.uid, job.job.job_id);
        match self.version {
            CgroupVersion::V1 => vec![
                self.cgroup_root.join(v1_memory_dir(uid, id)),
                self.cgroup_root.join(v1_cpu_dir(uid, id)),
            ],
            CgroupVersion::V2 => vec![self.cgroup_root.join(v2_job_dir(DEFAULT_V2_PATTERN, uid, id))],
        }
    }

    /// Writes the counters of `sample` for `job`, creating directories as needed.
    pub fn write_sample(&self, job: &LedgerJob, sample: &LedgerSample) -> Result<(), SimError> {
        mkdir(&self.cgroup_root)?;
        let pids: Vec<u32> = (0..sample.pids as u32).map(|p| job.first_pid + p).collect();
        let procs: String = pids.iter().map(|p| format!("{p}\n")).collect();
        let dirs = self.job_dirs(job);
        for d in &dirs {
            mkdir(d)?;
        }
        match self.version {
            CgroupVersion::V1 => {
                let (mem, cpu) = (&dirs[0], &dirs[1]);
                write(
                    &mem.join("memory.stat"),
                    &format!(
                        "cache {c}\nrss {r}\nmapped_file 0\ntotal_cache {c}\ntotal_rss {r}\n",
                        c = sample.cache_bytes,
                        r = sample.rss_bytes
                    ),
                )?;
                write(&mem.join("memory.usage_in_bytes"), &format!("{}\n", sample.memory_current_bytes))?;
                write(&mem.join("cgroup.procs"), &procs)?;
                write(&cpu.join("cpuacct.usage"), &format!("{}\n", sample.cpu_ns))?;
            }
            CgroupVersion::V2 => {
                write(&self.cgroup_root.join("cgroup.controllers"), "cpu memory pids\n")?;
                let dir = &dirs[0];
                write(
                    &dir.join("memory.stat"),
                    &format!("anon {}\nfile {}\nkernel 0\n", sample.rss_bytes, sample.cache_bytes),
                )?;
                write(&dir.join("memory.current"), &format!("{}\n", sample.memory_current_bytes))?;
                write(
                    &dir.join("cpu.stat"),
                    &format!("usage_usec {}\nuser_usec 0\nsystem_usec 0\n", sample.cpu_ns / 1000),
                )?;
                write(&dir.join("cgroup.procs"), &procs)?;
            }
        }
        let per_pid = sample.open_files / sample.pids.max(1);
        for pid in &pids {
            let fd_dir = self.proc_root.join(pid.to_string()).join("fd");
            mkdir(&fd_dir)?;
            for fd in 0..per_pid {
                let p = fd_dir.join(fd.to_string());
                if !p.exists() {
                    write(&p, "")?;
                }
            }
        }
        Ok(())
    }

    /// Deletes the job's cgroup directories and process entries.
    pub fn remove_job(&self, job: &LedgerJob) -> Result<(), SimError> {
        let pids = job.samples.iter().map(|s| s.pids).max().unwrap_or(0) as u32;
        let proc_dirs = (0..pids).map(|p| self.proc_root.join((job.first_pid + p).to_string()));
        for d in self.job_dirs(job).into_iter().chain(proc_dirs) {
            match fs::remove_dir_all(&d) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(io_err(&d)(e)),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Writes the tree as it stands at `t_unix_nano`: every job running then, with
/// its latest counter values. Returns the ledger it was derived from.
pub fn generate_fixture_tree(spec: &ScenarioSpec, root: &Path, t_unix_nano: u64) -> Result<GroundTruthLedger, SimError> {
    let ledger = plan(spec)?;
    let writer = FixtureWriter::new(root, spec.cgroup_version);
    mkdir(root)?;
    for job in &ledger.jobs {
        if t_unix_nano < job.start_unix_nano || t_unix_nano >= job.end_unix_nano {
            continue;
        }
        let k = ((t_unix_nano - job.start_unix_nano) / ledger.interval_nanos) as usize;
        writer.write_sample(job, &job.samples[k])?;
    }
    Ok(ledger)
}
