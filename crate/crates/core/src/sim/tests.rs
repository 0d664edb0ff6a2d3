use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::cgroup::{resolve_layout, snapshot};
use crate::clock::SimClock;

fn small_spec(seed: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::new(6, 3, seed);
    spec.duration_dist = (4.0, 8.0);
    spec.memory_plateau_dist = (1e9, 2e9);
    spec.cpu_cores = 2.0;
    spec
}

fn tree_contents(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn spec_json_uses_documented_field_names() {
    let text = r#"{
        "job_count": 3, "concurrency_cap": 2, "duration_dist": [16.0, 20.0],
        "memory_plateau_dist": [5.5e9, 5.9e9], "cpu_cores": 4.0,
        "sample_interval": "1s", "planted_outliers": [[1, 2.0]], "seed": 7
    }"#;
    let spec = ScenarioSpec::from_json(text).unwrap();
    assert_eq!(spec.sample_interval, Duration::from_secs(1));
    assert_eq!(spec.planted_outliers, vec![(1, 2.0)]);
    let back: ScenarioSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(back, spec);

    let mut bad = spec.clone();
    bad.duration_dist = (20.0, 16.0);
    assert!(bad.validate().is_err());
    bad = spec.clone();
    bad.concurrency_cap = 0;
    assert!(bad.validate().is_err());
    bad = spec.clone();
    bad.duration_dist = (2.0, 20.0);
    assert!(bad.validate().is_err(), "plateau needs three intervals");
    bad = spec;
    bad.planted_outliers = vec![(9, 2.0)];
    assert!(bad.validate().is_err());
}

#[test]
fn single_job_reaches_plateau_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ScenarioSpec::new(1, 1, 3);
    spec.memory_plateau_dist = (8e9, 8e9);
    spec.duration_dist = (10.0, 10.0);
    let ledger = plan(&spec).unwrap();
    let job = &ledger.jobs[0];
    assert_eq!(job.ticks, 10);
    assert_eq!(job.planned_max_memory, 8_000_000_000);
    let plateau: Vec<u64> = job.samples.iter().map(|s| s.rss_bytes).collect();
    assert_eq!(plateau.iter().filter(|v| **v == 8_000_000_000).count(), 6);
    let mid = job.samples[5].time_unix_nano;
    generate_fixture_tree(&spec, dir.path(), mid).unwrap();
    let stat = std::fs::read_to_string(
        dir.path()
            .join("cgroup")
            .join(crate::cgroup::v1_memory_dir(1000, job.job.job_id))
            .join("memory.stat"),
    )
    .unwrap();
    assert!(stat.contains("total_rss 8000000000\n"));
    let layout = resolve_layout(&dir.path().join("cgroup"), 1000, job.job.job_id).unwrap();
    let snap = snapshot(&layout, &dir.path().join("proc"), &SimClock::new(mid)).unwrap();
    assert_eq!(snap.rss_bytes, 8_000_000_000);
    assert_eq!(snap.cpu_usage_ns_cumulative, job.samples[5].cpu_ns);
    assert_eq!(snap.open_files, job.samples[5].open_files);
    assert_eq!(snap.pid_count, job.samples[5].pids);
}

#[test]
fn v2_tree_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(11);
    spec.cgroup_version = CgroupVersion::V2;
    spec.cpu_cores = 1.5;
    let ledger = plan(&spec).unwrap();
    let job = &ledger.jobs[0];
    let t = job.samples[3].time_unix_nano;
    generate_fixture_tree(&spec, dir.path(), t).unwrap();
    let layout = resolve_layout(&dir.path().join("cgroup"), 1000, job.job.job_id).unwrap();
    assert_eq!(layout.version, CgroupVersion::V2);
    let snap = snapshot(&layout, &dir.path().join("proc"), &SimClock::new(t)).unwrap();
    assert_eq!(snap.rss_bytes, job.samples[3].rss_bytes);
    assert_eq!(snap.cpu_usage_ns_cumulative, job.samples[3].cpu_ns);
}

#[test]
fn empty_tree_before_first_start() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(1);
    generate_fixture_tree(&spec, dir.path(), spec.start_unix_nano - 1).unwrap();
    assert!(tree_contents(dir.path()).is_empty());
}

#[test]
fn same_seed_same_tree() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = small_spec(99);
    let t = spec.start_unix_nano + 3 * spec.interval_nanos();
    let la = generate_fixture_tree(&spec, a.path(), t).unwrap();
    let lb = generate_fixture_tree(&spec, b.path(), t).unwrap();
    assert_eq!(la, lb);
    assert_eq!(tree_contents(a.path()), tree_contents(b.path()));
    assert!(!tree_contents(a.path()).is_empty());
    generate_fixture_tree(&small_spec(100), c.path(), t).unwrap();
    assert_ne!(tree_contents(a.path()), tree_contents(c.path()));
}

#[test]
fn planted_outliers_are_shortest() {
    let mut spec = small_spec(5);
    spec.job_count = 20;
    spec.planted_outliers = vec![(3, 1.0), (17, 2.0)];
    let ledger = plan(&spec).unwrap();
    let mut by_len: Vec<(u64, usize)> = ledger.jobs.iter().map(|j| (j.ticks, j.index)).collect();
    by_len.sort();
    assert_eq!(by_len[..2], [(1, 3), (2, 17)]);
    assert!(ledger.jobs[3].planted && !ledger.jobs[4].planted);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn profile_peaks_exactly(peak in 1u64..1u64 << 40, n in 1u64..200) {
        let values: Vec<u64> = (0..n).map(|k| memory_profile(peak, k, n)).collect();
        prop_assert_eq!(*values.iter().max().unwrap(), peak);
        prop_assert!(values.iter().filter(|v| **v == peak).count() as u64 >= n.min(3));
    }

    #[test]
    fn schedule_respects_cap(jobs in 0usize..60, cap in 1usize..12, seed in any::<u64>()) {
        let mut spec = small_spec(seed);
        spec.job_count = jobs;
        spec.concurrency_cap = cap;
        let ledger = plan(&spec).unwrap();
        prop_assert!(ledger.peak_concurrency() <= cap);
        if jobs >= cap {
            prop_assert_eq!(ledger.peak_concurrency(), cap);
        }
        prop_assert!(ledger.jobs.windows(2).all(|w| w[0].start_tick <= w[1].start_tick));
        for j in &ledger.jobs {
            prop_assert_eq!(j.samples.len() as u64, j.ticks);
            prop_assert!(j.samples.windows(2).all(|w| w[0].cpu_ns <= w[1].cpu_ns));
            for t in &j.tasks {
                prop_assert!(j.start_tick <= t.start_tick && t.end_tick <= j.end_tick());
            }
        }
        prop_assert_eq!(plan(&spec).unwrap(), ledger);
    }
}

#[test]
fn fault_free_scenario_passes() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(&small_spec(21), dir.path()).unwrap();
    let verdict = oracle_check(&run.report);
    assert!(verdict.passed, "{:#?}", verdict.diffs);
    let actual = run.report.actual.as_ref().unwrap();
    assert_eq!(actual.active_jobs.max(), Some(3.0));
    assert_eq!(actual.utilization, Some((2.0, 2.0)));
    assert_eq!(run.report.agents.job_end_detected, 6);
}

#[test]
fn empty_scenario_passes() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(&ScenarioSpec::new(0, 1, 1), dir.path()).unwrap();
    let verdict = oracle_check(&run.report);
    assert!(verdict.passed, "{:#?}", verdict.diffs);
    let actual = run.report.actual.unwrap();
    assert!(actual.max_memory.is_empty() && actual.per_job_max.is_empty());
}

#[test]
fn short_outage_is_absorbed_by_retries() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(8);
    spec.faults.collector_outage_attempts = 3;
    let run = run_scenario(&spec, dir.path()).unwrap();
    let verdict = oracle_check(&run.report);
    assert!(verdict.passed, "{:#?}", verdict.diffs);
    assert_eq!(run.report.collector.as_ref().unwrap().unavailable, 3);
    assert!(run.payloads.iter().any(|p| p.status == Ok(503)));
}

#[test]
fn dropped_batch_is_reported_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(9);
    spec.faults.drop_batches = vec![1];
    let run = run_scenario(&spec, dir.path()).unwrap();
    let verdict = oracle_check(&run.report);
    assert!(!verdict.passed);
    let dropped: std::collections::BTreeSet<String> = run.report.harness_dropped.iter().cloned().collect();
    assert!(!dropped.is_empty());
    assert_eq!(verdict.missing_records(), dropped);
}

#[test]
fn v2_scenario_passes() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(31);
    spec.cgroup_version = CgroupVersion::V2;
    let run = run_scenario(&spec, dir.path()).unwrap();
    let verdict = oracle_check(&run.report);
    assert!(verdict.passed, "{:#?}", verdict.diffs);
}
