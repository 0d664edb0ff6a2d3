//! Aggregations over query results: usage timelines, per-job maxima, duration
//! histograms, concurrency timelines and per-job panels, plus SVG rendering.
//!
//! Everything here works on rows extracted from a [`ResultTable`], so the same
//! code serves a local store and a remote query endpoint.

mod chart;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use chart::{render_chart, write_chart, ChartData, ChartKind, ChartLabels};

use crate::model::SpanKind;
use crate::store::table::{Column, ColumnType, JobKey, MetricRow, SpanRow};
use crate::store::{ResultTable, TableError};

pub const DEFAULT_BIN_COUNT: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("nothing to render: {0} is empty")]
    EmptyData(&'static str),
    #[error("unknown job ids: {}", .0.iter().map(u64::to_string).collect::<Vec<_>>().join(", "))]
    UnknownJobs(Vec<u64>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("writing {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Contiguous equal-width buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub bucket_width: u64,
    pub bucket_starts: Vec<u64>,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn empty(bucket_width: u64) -> Self {
        Self {
            bucket_width,
            bucket_starts: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn max(&self) -> Option<f64> {
        self.values.iter().copied().reduce(f64::max)
    }

    pub fn to_table(&self) -> ResultTable {
        ResultTable {
            columns: vec![col("bucket_start", ColumnType::Int), col("value", ColumnType::Float)],
            rows: self
                .bucket_starts
                .iter()
                .zip(&self.values)
                .map(|(s, v)| vec![Value::from(*s), float(*v)])
                .collect(),
        }
    }
}

/// Equal-width histogram with summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Number of contributing jobs (the sum of `counts`).
    pub jobs: u64,
}

impl Distribution {
    pub fn empty() -> Self {
        Self {
            bin_edges: Vec::new(),
            counts: Vec::new(),
            min: 0.0,
            max: 0.0,
            mean: 0.0,
            jobs: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.jobs == 0
    }

    /// Histogram of `values` over `[min, max]` in `bin_count` equal-width bins.
    /// Value `v` falls in bin `i` when `edges[i] <= v < edges[i + 1]`; the
    /// maximum goes in the last bin. Identical values collapse to one bin.
    pub fn from_values(values: &[f64], bin_count: usize) -> Result<Self, AnalysisError> {
        if bin_count == 0 {
            return Err(AnalysisError::InvalidArgument("bin count must be at least 1".into()));
        }
        if values.is_empty() {
            return Ok(Self::empty());
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::InvalidArgument("non-finite value".into()));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mut edges: Vec<f64> = if min == max {
            let h = (min.abs() * 1e-9).max(0.5);
            vec![min - h, min + h]
        } else {
            let width = (max - min) / bin_count as f64;
            let mut e: Vec<f64> = (0..bin_count).map(|i| min + width * i as f64).collect();
            e.push(max);
            e
        };
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            edges = vec![min, max];
        }
        let n = edges.len() - 1;
        let mut counts = vec![0u64; n];
        for v in values {
            let i = edges[..n].partition_point(|e| *e <= *v).saturating_sub(1);
            counts[i] += 1;
        }
        Ok(Self {
            bin_edges: edges,
            counts,
            min,
            max,
            mean,
            jobs: values.len() as u64,
        })
    }

    pub fn to_table(&self) -> ResultTable {
        ResultTable {
            columns: vec![
                col("bin_start", ColumnType::Float),
                col("bin_end", ColumnType::Float),
                col("count", ColumnType::Int),
            ],
            rows: self
                .counts
                .iter()
                .enumerate()
                .map(|(i, c)| vec![float(self.bin_edges[i]), float(self.bin_edges[i + 1]), Value::from(*c)])
                .collect(),
        }
    }
}

fn col(name: &str, ty: ColumnType) -> Column {
    Column {
        name: name.to_owned(),
        ty,
    }
}

fn float(v: f64) -> Value {
    serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
}

/// Bucket layout: `[start + i*width, start + (i+1)*width)` covering `[start, end)`.
fn bucket_starts(start: u64, end: u64, width: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut s = start;
    while s < end {
        out.push(s);
        match s.checked_add(width) {
            Some(n) => s = n,
            None => break,
        }
    }
    out
}

fn align_down(t: u64, width: u64) -> u64 {
    t - t % width
}

/// Time window for bucketed series; `None` derives it from the data.
pub type TimeRange = Option<(u64, u64)>;

/// Sum over jobs of each job's carried-forward value of `metric_name`.
///
/// For bucket `[bs, be)` a job contributes the value of its last sample with
/// time `< be`, provided that sample is inside the bucket or at most
/// `horizon = 2 * sample_interval` before `be`; otherwise it contributes 0.
/// Without an explicit range, buckets run from the first sample (aligned down
/// to the bucket width) until every job's last sample has gone stale.
pub fn total_usage_over_time(
    rows: &[MetricRow],
    metric_name: &str,
    bucket_width: u64,
    sample_interval: u64,
    range: TimeRange,
) -> Result<TimeSeries, AnalysisError> {
    if bucket_width == 0 {
        return Err(AnalysisError::InvalidArgument("bucket width must be positive".into()));
    }
    let horizon = sample_interval.saturating_mul(2);
    let mut per_job: BTreeMap<&JobKey, Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.name == metric_name) {
        per_job.entry(&r.job).or_default().push((r.time_unix_nano, r.value));
    }
    if per_job.is_empty() && range.is_none() {
        return Ok(TimeSeries::empty(bucket_width));
    }
    for series in per_job.values_mut() {
        // Stable: equal timestamps keep row order, and the later row wins.
        series.sort_by_key(|(t, _)| *t);
    }
    let (start, end) = match range {
        Some(r) => r,
        None => {
            let first = per_job.values().map(|s| s[0].0).min().expect("non-empty");
            let last = per_job.values().map(|s| s[s.len() - 1].0).max().expect("non-empty");
            (align_down(first, bucket_width), last.saturating_add(horizon).saturating_add(1))
        }
    };
    let starts = bucket_starts(start, end, bucket_width);
    let values = starts
        .iter()
        .map(|&bs| {
            let be = bs.saturating_add(bucket_width);
            per_job
                .values()
                .map(|series| {
                    let idx = series.partition_point(|(t, _)| *t < be);
                    match idx.checked_sub(1).map(|i| series[i]) {
                        Some((t, v)) if t >= bs || be - t <= horizon => v,
                        _ => 0.0,
                    }
                })
                .sum()
        })
        .collect();
    Ok(TimeSeries {
        bucket_width,
        bucket_starts: starts,
        values,
    })
}

/// Per-job maximum of `metric_name`, histogrammed.
pub fn max_per_job_distribution(
    rows: &[MetricRow],
    metric_name: &str,
    bin_count: usize,
) -> Result<Distribution, AnalysisError> {
    Distribution::from_values(&per_job_max(rows, metric_name).into_values().collect::<Vec<_>>(), bin_count)
}

pub fn per_job_max<'a>(rows: &'a [MetricRow], metric_name: &str) -> BTreeMap<&'a JobKey, f64> {
    let mut maxima: BTreeMap<&JobKey, f64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.name == metric_name) {
        maxima
            .entry(&r.job)
            .and_modify(|m| *m = m.max(r.value))
            .or_insert(r.value);
    }
    maxima
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Durations {
    /// Job span durations in seconds.
    pub distribution: Distribution,
    /// Job spans still open, excluded from the histogram.
    pub open_count: u64,
}

/// Histogram of closed job-span durations in seconds.
pub fn job_durations(spans: &[SpanRow], bin_count: usize) -> Result<Durations, AnalysisError> {
    let mut secs = Vec::new();
    let mut open_count = 0;
    for s in spans.iter().filter(|s| s.kind == SpanKind::Job) {
        match s.end_unix_nano {
            Some(end) => secs.push((end - s.start_unix_nano) as f64 / 1e9),
            None => open_count += 1,
        }
    }
    Ok(Durations {
        distribution: Distribution::from_values(&secs, bin_count)?,
        open_count,
    })
}

/// Number of job spans overlapping each bucket. Open spans count as running
/// until the end of the range.
pub fn active_jobs_timeline(spans: &[SpanRow], bucket_width: u64, range: TimeRange) -> Result<TimeSeries, AnalysisError> {
    if bucket_width == 0 {
        return Err(AnalysisError::InvalidArgument("bucket width must be positive".into()));
    }
    let jobs: Vec<(u64, u64)> = spans
        .iter()
        .filter(|s| s.kind == SpanKind::Job)
        .map(|s| (s.start_unix_nano, s.end_unix_nano.unwrap_or(u64::MAX)))
        .collect();
    let (start, end) = match range {
        Some(r) => r,
        None if jobs.is_empty() => return Ok(TimeSeries::empty(bucket_width)),
        None => {
            let first = jobs.iter().map(|j| j.0).min().expect("non-empty");
            let last = jobs
                .iter()
                .map(|j| if j.1 == u64::MAX { j.0 } else { j.1 })
                .max()
                .expect("non-empty");
            (align_down(first, bucket_width), last.max(first + 1))
        }
    };
    // Sweep: +1 at the first bucket a span touches, -1 after its last.
    let starts = bucket_starts(start, end, bucket_width);
    let n = starts.len();
    if n == 0 {
        return Ok(TimeSeries::empty(bucket_width));
    }
    let grid_end = starts[n - 1].saturating_add(bucket_width);
    let mut delta = vec![0i64; n + 1];
    for &(s, e) in &jobs {
        if e <= start || s >= grid_end || e <= s {
            continue;
        }
        let first = ((s.max(start) - start) / bucket_width) as usize;
        // Last bucket with bucket_start < e.
        let last = (((e.min(grid_end) - 1 - start) / bucket_width) as usize).min(n - 1);
        delta[first] += 1;
        delta[last + 1] -= 1;
    }
    let mut running = 0i64;
    let values = delta[..n]
        .iter()
        .map(|d| {
            running += d;
            running as f64
        })
        .collect();
    Ok(TimeSeries {
        bucket_width,
        bucket_starts: starts,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobSelector {
    ShortestK(usize),
    Ids(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPanel {
    pub job: JobKey,
    pub duration_nanos: Option<u64>,
    /// Raw `(time, value)` samples of the metric, by time.
    pub samples: Vec<(u64, f64)>,
}

/// Selects jobs and returns each one's raw series of `metric_name`.
///
/// `ShortestK` ranks closed job spans by duration, ties by job id; asking for
/// more jobs than exist returns all of them.
pub fn per_job_grid(
    rows: &[MetricRow],
    spans: &[SpanRow],
    metric_name: &str,
    selector: &JobSelector,
) -> Result<Vec<GridPanel>, AnalysisError> {
    let job_spans: Vec<(&JobKey, Option<u64>)> = spans
        .iter()
        .filter(|s| s.kind == SpanKind::Job)
        .filter_map(|s| s.job.as_ref().map(|j| (j, s.end_unix_nano.map(|e| e - s.start_unix_nano))))
        .collect();
    let chosen: Vec<(JobKey, Option<u64>)> = match selector {
        JobSelector::ShortestK(0) => {
            return Err(AnalysisError::InvalidArgument("k must be at least 1".into()))
        }
        JobSelector::ShortestK(k) => {
            let mut closed: Vec<(u64, &JobKey)> =
                job_spans.iter().filter_map(|(j, d)| d.map(|d| (d, *j))).collect();
            closed.sort_by(|a, b| (a.0, a.1.job_id, a.1).cmp(&(b.0, b.1.job_id, b.1)));
            closed.into_iter().take(*k).map(|(d, j)| (j.clone(), Some(d))).collect()
        }
        JobSelector::Ids(ids) => {
            let known: BTreeSet<u64> = job_spans
                .iter()
                .map(|(j, _)| j.job_id)
                .chain(rows.iter().map(|r| r.job.job_id))
                .collect();
            let unknown: Vec<u64> = ids.iter().copied().filter(|i| !known.contains(i)).collect();
            if !unknown.is_empty() {
                return Err(AnalysisError::UnknownJobs(unknown));
            }
            let mut out: Vec<(JobKey, Option<u64>)> = Vec::new();
            for id in ids {
                let mut keys: BTreeSet<&JobKey> = job_spans.iter().filter(|(j, _)| j.job_id == *id).map(|(j, _)| *j).collect();
                keys.extend(rows.iter().filter(|r| r.job.job_id == *id).map(|r| &r.job));
                for key in keys {
                    let d = job_spans.iter().find(|(j, _)| *j == key).and_then(|(_, d)| *d);
                    out.push((key.clone(), d));
                }
            }
            out
        }
    };
    Ok(chosen
        .into_iter()
        .map(|(job, duration_nanos)| {
            let mut samples: Vec<(u64, f64)> = rows
                .iter()
                .filter(|r| r.name == metric_name && r.job == job)
                .map(|r| (r.time_unix_nano, r.value))
                .collect();
            samples.sort_by_key(|s| s.0);
            GridPanel {
                job,
                duration_nanos,
                samples,
            }
        })
        .collect())
}

/// Grid panels flattened into one table: job identity, time, value.
pub fn grid_table(panels: &[GridPanel]) -> ResultTable {
    use crate::store::table::{HOST_NAME, JOB_ARRAY_TASK_ID, JOB_ID, JOB_UID, TIME, VALUE};
    ResultTable {
        columns: vec![
            col(TIME, ColumnType::Int),
            col(VALUE, ColumnType::Float),
            col(JOB_ID, ColumnType::Int),
            col(JOB_UID, ColumnType::Int),
            col(HOST_NAME, ColumnType::String),
            col(JOB_ARRAY_TASK_ID, ColumnType::Int),
            col("duration", ColumnType::Int),
        ],
        rows: panels
            .iter()
            .flat_map(|p| {
                p.samples.iter().map(move |(t, v)| {
                    vec![
                        Value::from(*t),
                        float(*v),
                        Value::from(p.job.job_id),
                        Value::from(p.job.uid),
                        Value::from(p.job.hostname.clone()),
                        p.job.array_task_id.map(Value::from).unwrap_or(Value::Null),
                        p.duration_nanos.map(Value::from).unwrap_or(Value::Null),
                    ]
                })
            })
            .collect(),
    }
}
