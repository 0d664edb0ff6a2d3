//! Append-only telemetry store.
//!
//! Each signal gets its own sequence of newline-delimited JSON segment files
//! (`metrics-000001.jsonl`, `spans-000001.jsonl`, ...). The highest-numbered
//! segment of a signal is active, every other one is sealed and never written
//! again. A single writer appends; any number of readers query concurrently and
//! only ever see bytes that were fsynced before they took their snapshot.

mod record;
pub mod table;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

pub use record::{metric_identity, span_identity, Signal, StoredMetric, StoredRecord, StoredSpan};
pub use table::{ResultTable, TableError};

use crate::model::{SpanId, TraceId};

pub const DEFAULT_MAX_SEGMENT_BYTES: u64 = 64 * 1024 * 1024;
pub const DEFAULT_MAX_SEGMENT_SPAN_NANOS: u64 = 3_600 * 1_000_000_000;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: corrupt record: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid time range: start {start} is not before end {end}")]
    InvalidRange { start: u64, end: u64 },
    #[error("unknown signal {0:?}")]
    UnknownSignal(String),
    #[error("store unavailable: {0}")]
    Unavailable(String),
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

/// When the active segment is sealed and a new one started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPolicy {
    pub max_bytes: u64,
    pub max_span_nanos: u64,
}

impl Default for SegmentPolicy {
    fn default() -> Self {
        Self {
            max_bytes: DEFAULT_MAX_SEGMENT_BYTES,
            max_span_nanos: DEFAULT_MAX_SEGMENT_SPAN_NANOS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub path: PathBuf,
    pub signal: Signal,
    pub seq: u32,
    /// Zero when the segment holds no records.
    pub min_time: u64,
    pub max_time: u64,
    pub record_count: u64,
    /// Bytes covered by complete, synced records.
    pub committed_len: u64,
    pub sealed: bool,
}

impl Segment {
    fn overlaps(&self, start: u64, end: u64) -> bool {
        self.record_count > 0 && self.min_time < end && self.max_time >= start
    }

    fn extend_times(&mut self, t: u64) {
        if self.record_count == 0 {
            self.min_time = t;
            self.max_time = t;
        } else {
            self.min_time = self.min_time.min(t);
            self.max_time = self.max_time.max(t);
        }
    }
}

fn segment_file_name(signal: Signal, seq: u32) -> String {
    format!("{}-{seq:06}.jsonl", signal.as_str())
}

fn parse_segment_file_name(name: &str) -> Option<(Signal, u32)> {
    let stem = name.strip_suffix(".jsonl")?;
    let (sig, seq) = stem.rsplit_once('-')?;
    if seq.len() != 6 || !seq.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let signal = match sig {
        "metrics" => Signal::Metrics,
        "spans" => Signal::Spans,
        _ => return None,
    };
    Some((signal, seq.parse().ok()?))
}

fn decode_line(signal: Signal, line: &[u8]) -> Result<StoredRecord, serde_json::Error> {
    Ok(match signal {
        Signal::Metrics => StoredRecord::Metric(serde_json::from_slice(line)?),
        Signal::Spans => StoredRecord::Span(serde_json::from_slice(line)?),
    })
}

/// Scans a segment file, truncating a torn or unparseable trailing line.
fn recover_segment(path: &Path, signal: Signal, seq: u32) -> Result<Segment, StoreError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| StoreError::io(path, e))?;
    let mut seg = Segment {
        path: path.to_owned(),
        signal,
        seq,
        min_time: 0,
        max_time: 0,
        record_count: 0,
        committed_len: 0,
        sealed: false,
    };
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            break;
        };
        let line = &bytes[offset..offset + nl];
        match decode_line(signal, line) {
            Ok(rec) => {
                seg.extend_times(rec.time_unix_nano());
                seg.record_count += 1;
                offset += nl + 1;
            }
            Err(e) if offset + nl + 1 == bytes.len() => {
                debug!(path = %path.display(), line = line_no, error = %e, "dropping unparseable trailing line");
                break;
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    path: path.to_owned(),
                    line: line_no,
                    reason: e.to_string(),
                })
            }
        }
    }
    if offset < bytes.len() {
        warn!(
            path = %path.display(),
            discarded = bytes.len() - offset,
            "truncating torn trailing record"
        );
        OpenOptions::new()
            .write(true)
            .open(path)
            .and_then(|f| {
                f.set_len(offset as u64)?;
                f.sync_all()
            })
            .map_err(|e| StoreError::io(path, e))?;
    }
    seg.committed_len = offset as u64;
    Ok(seg)
}

/// Deliberate failures for exercising recovery and retry paths.
#[derive(Debug, Default)]
struct Faults {
    fail_appends: u32,
    crash_after_bytes: Option<u64>,
    crashed: bool,
}

struct Writer {
    active: HashMap<Signal, File>,
}

/// Time range plus filters over one signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub signal: Signal,
    pub start_time: u64,
    pub end_time: u64,
    #[serde(default)]
    pub metric_names: Option<Vec<String>>,
    #[serde(default)]
    pub attribute_filters: BTreeMap<String, String>,
    #[serde(default)]
    pub trace_id: Option<TraceId>,
}

impl QueryRequest {
    pub fn new(signal: Signal, start_time: u64, end_time: u64) -> Self {
        Self {
            signal,
            start_time,
            end_time,
            metric_names: None,
            attribute_filters: BTreeMap::new(),
            trace_id: None,
        }
    }

    /// Every record of the signal.
    pub fn everything(signal: Signal) -> Self {
        Self::new(signal, 0, u64::MAX)
    }

    pub fn with_names<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.metric_names = Some(names.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attribute_filters.insert(key.into(), value.into());
        self
    }

    pub fn with_trace(mut self, trace_id: TraceId) -> Self {
        self.trace_id = Some(trace_id);
        self
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.start_time >= self.end_time {
            return Err(StoreError::InvalidRange {
                start: self.start_time,
                end: self.end_time,
            });
        }
        Ok(())
    }

    pub fn matches(&self, rec: &StoredRecord) -> bool {
        let t = rec.time_unix_nano();
        if t < self.start_time || t >= self.end_time {
            return false;
        }
        if let Some(names) = &self.metric_names {
            if !names.iter().any(|n| n == rec.name()) {
                return false;
            }
        }
        if let Some(want) = self.trace_id {
            let got = match rec {
                StoredRecord::Metric(m) => m.sample.trace_id,
                StoredRecord::Span(s) => Some(s.span.context.trace_id()),
            };
            if got != Some(want) {
                return false;
            }
        }
        if !self.attribute_filters.is_empty() {
            let attrs = rec.attributes();
            return self
                .attribute_filters
                .iter()
                .all(|(k, v)| attrs.get(k) == Some(v));
        }
        true
    }
}

/// One row of [`Store::list_traces`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub trace_id: TraceId,
    pub root_name: String,
    pub start_unix_nano: u64,
    pub end_unix_nano: Option<u64>,
    pub span_count: u64,
    pub orphan_count: u64,
}

pub struct Store {
    dir: PathBuf,
    policy: SegmentPolicy,
    segments: RwLock<Vec<Segment>>,
    writer: Mutex<Writer>,
    faults: Mutex<Faults>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("dir", &self.dir).finish_non_exhaustive()
    }
}

impl Store {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with_policy(dir, SegmentPolicy::default())
    }

    /// Opens or creates the store, recovering every segment found.
    pub fn open_with_policy(dir: impl AsRef<Path>, policy: SegmentPolicy) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_owned();
        fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
        let mut found = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| StoreError::io(&dir, e))? {
            let entry = entry.map_err(|e| StoreError::io(&dir, e))?;
            let name = entry.file_name();
            if let Some((signal, seq)) = name.to_str().and_then(parse_segment_file_name) {
                found.push((signal, seq, entry.path()));
            }
        }
        found.sort_by_key(|(signal, seq, _)| (*signal, *seq));
        let mut segments = Vec::with_capacity(found.len());
        for (signal, seq, path) in found {
            segments.push(recover_segment(&path, signal, seq)?);
        }
        for i in 0..segments.len() {
            let later = segments[i + 1..].iter().any(|s| s.signal == segments[i].signal);
            segments[i].sealed = later;
        }
        Ok(Self {
            dir,
            policy,
            segments: RwLock::new(segments),
            writer: Mutex::new(Writer {
                active: HashMap::new(),
            }),
            faults: Mutex::new(Faults::default()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn policy(&self) -> SegmentPolicy {
        self.policy
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.segments.read().expect("segment lock").clone()
    }

    pub fn record_count(&self, signal: Signal) -> u64 {
        self.segments
            .read()
            .expect("segment lock")
            .iter()
            .filter(|s| s.signal == signal)
            .map(|s| s.record_count)
            .sum()
    }

    /// The next `n` appends fail without touching any file.
    pub fn inject_append_failures(&self, n: u32) {
        self.faults.lock().expect("fault lock").fail_appends = n;
    }

    /// The next append writes only its first `bytes` bytes and then behaves as
    /// if the process died: nothing is rolled back and the store refuses further
    /// writes until reopened.
    pub fn inject_crash_after(&self, bytes: u64) {
        self.faults.lock().expect("fault lock").crash_after_bytes = Some(bytes);
    }

    /// Appends a batch. Each signal's records land in one write followed by an
    /// fsync; on failure every file touched by this call is rolled back.
    pub fn append(&self, records: &[StoredRecord]) -> Result<usize, StoreError> {
        if records.is_empty() {
            return Ok(0);
        }
        let mut writer = self.writer.lock().expect("writer lock");
        let crash_after = {
            let mut faults = self.faults.lock().expect("fault lock");
            if faults.crashed {
                return Err(StoreError::Unavailable("store crashed; reopen to recover".into()));
            }
            if faults.fail_appends > 0 {
                faults.fail_appends -= 1;
                return Err(StoreError::Unavailable("injected append failure".into()));
            }
            faults.crash_after_bytes.take()
        };

        let mut groups: BTreeMap<Signal, Vec<&StoredRecord>> = BTreeMap::new();
        for rec in records {
            groups.entry(rec.signal()).or_default().push(rec);
        }

        // (segment index, previous committed length) for rollback.
        let mut touched: Vec<(usize, u64)> = Vec::new();
        let mut staged = self.segments();
        let result = (|| -> Result<(), StoreError> {
            for (signal, recs) in &groups {
                let idx = self.prepare_active(&mut writer, &mut staged, *signal, recs)?;
                let mut buf = Vec::new();
                for rec in recs {
                    serde_json::to_writer(&mut buf, rec).map_err(|e| StoreError::io(&staged[idx].path, io::Error::other(e)))?;
                    buf.push(b'\n');
                }
                let seg = &mut staged[idx];
                touched.push((idx, seg.committed_len));
                let file = writer.active.get_mut(signal).expect("active file opened");
                if let Some(limit) = crash_after {
                    let cut = (limit as usize).min(buf.len());
                    let _ = file.write_all(&buf[..cut]).and_then(|_| file.sync_data());
                    self.faults.lock().expect("fault lock").crashed = true;
                    touched.clear();
                    return Err(StoreError::Unavailable(format!("injected crash after {cut} bytes")));
                }
                file.write_all(&buf)
                    .and_then(|_| file.sync_data())
                    .map_err(|e| StoreError::io(&seg.path, e))?;
                for rec in recs {
                    seg.extend_times(rec.time_unix_nano());
                    seg.record_count += 1;
                }
                seg.committed_len += buf.len() as u64;
            }
            Ok(())
        })();

        match result {
            Ok(()) => {
                *self.segments.write().expect("segment lock") = staged;
                Ok(records.len())
            }
            Err(e) => {
                for (idx, len) in touched {
                    let seg = &staged[idx];
                    if let Some(file) = writer.active.get(&seg.signal) {
                        if let Err(re) = file.set_len(len).and_then(|_| file.sync_data()) {
                            warn!(path = %seg.path.display(), error = %re, "rollback failed");
                        }
                    }
                }
                // New empty segments created for this call stay on disk; they
                // are harmless and picked up as the active segment next time.
                let mut published = self.segments.write().expect("segment lock");
                for seg in staged.iter().filter(|s| s.record_count == 0) {
                    if !published.iter().any(|p| p.path == seg.path) {
                        published.push(seg.clone());
                    }
                }
                for p in published.iter_mut() {
                    if let Some(s) = staged.iter().find(|s| s.path == p.path) {
                        p.sealed = s.sealed;
                    }
                }
                published.sort_by_key(|s| (s.signal, s.seq));
                Err(e)
            }
        }
    }

    /// Ensures `writer.active[signal]` is open on a segment able to take `recs`,
    /// sealing and rotating as needed. Returns the segment's index in `staged`.
    fn prepare_active(
        &self,
        writer: &mut Writer,
        staged: &mut Vec<Segment>,
        signal: Signal,
        recs: &[&StoredRecord],
    ) -> Result<usize, StoreError> {
        let current = staged.iter().rposition(|s| s.signal == signal);
        let batch_min = recs.iter().map(|r| r.time_unix_nano()).min().unwrap_or(0);
        let batch_max = recs.iter().map(|r| r.time_unix_nano()).max().unwrap_or(0);
        let rotate = match current {
            None => true,
            Some(i) => {
                let s = &staged[i];
                s.record_count > 0
                    && (s.committed_len >= self.policy.max_bytes
                        || s.max_time.max(batch_max) - s.min_time.min(batch_min) > self.policy.max_span_nanos)
            }
        };
        let idx = if rotate {
            let seq = current.map(|i| staged[i].seq + 1).unwrap_or(1);
            if let Some(i) = current {
                staged[i].sealed = true;
                debug!(path = %staged[i].path.display(), records = staged[i].record_count, "sealed segment");
            }
            writer.active.remove(&signal);
            let path = self.dir.join(segment_file_name(signal, seq));
            staged.push(Segment {
                path,
                signal,
                seq,
                min_time: 0,
                max_time: 0,
                record_count: 0,
                committed_len: 0,
                sealed: false,
            });
            staged.len() - 1
        } else {
            current.expect("not rotating implies an active segment")
        };
        if let std::collections::hash_map::Entry::Vacant(slot) = writer.active.entry(signal) {
            let path = &staged[idx].path;
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| StoreError::io(path, e))?;
            if rotate {
                if let Ok(d) = File::open(&self.dir) {
                    let _ = d.sync_all();
                }
            }
            slot.insert(file);
        }
        Ok(idx)
    }

    fn read_segment(seg: &Segment) -> Result<Vec<StoredRecord>, StoreError> {
        let file = File::open(&seg.path).map_err(|e| StoreError::io(&seg.path, e))?;
        let reader = BufReader::new(file.take(seg.committed_len));
        let mut out = Vec::with_capacity(seg.record_count as usize);
        for (i, line) in reader.split(b'\n').enumerate() {
            let line = line.map_err(|e| StoreError::io(&seg.path, e))?;
            let rec = decode_line(seg.signal, &line).map_err(|e| StoreError::Corrupt {
                path: seg.path.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            out.push(rec);
        }
        Ok(out)
    }

    /// Records of `signal` from segments overlapping `[start, end)`, in append
    /// order. Spans are collapsed to their latest state (closed beats open).
    fn scan(&self, signal: Signal, start: u64, end: u64) -> Result<Vec<StoredRecord>, StoreError> {
        let snapshot: Vec<Segment> = self
            .segments
            .read()
            .expect("segment lock")
            .iter()
            .filter(|s| s.signal == signal && s.overlaps(start, end))
            .cloned()
            .collect();
        let mut out = Vec::new();
        for seg in &snapshot {
            out.extend(Self::read_segment(seg)?);
        }
        if signal == Signal::Spans {
            out = collapse_spans(out);
        }
        Ok(out)
    }

    /// Matching records sorted by time; equal times keep append order.
    pub fn query_records(&self, req: &QueryRequest) -> Result<Vec<StoredRecord>, StoreError> {
        req.validate()?;
        let mut out: Vec<StoredRecord> = self
            .scan(req.signal, req.start_time, req.end_time)?
            .into_iter()
            .filter(|r| req.matches(r))
            .collect();
        out.sort_by_key(|r| r.time_unix_nano());
        Ok(out)
    }

    pub fn query(&self, req: &QueryRequest) -> Result<ResultTable, StoreError> {
        Ok(ResultTable::from_records(req.signal, &self.query_records(req)?))
    }

    /// Identity of every stored record of a signal (open spans included).
    pub fn identities(&self, signal: Signal) -> Result<HashSet<String>, StoreError> {
        let snapshot: Vec<Segment> = self
            .segments
            .read()
            .expect("segment lock")
            .iter()
            .filter(|s| s.signal == signal)
            .cloned()
            .collect();
        let mut ids = HashSet::new();
        for seg in &snapshot {
            ids.extend(Self::read_segment(seg)?.into_iter().map(|r| r.id().to_owned()));
        }
        Ok(ids)
    }

    /// One row per trace whose root span starts in `[start, end)`.
    pub fn list_traces(&self, start: u64, end: u64) -> Result<Vec<TraceSummary>, StoreError> {
        if start >= end {
            return Err(StoreError::InvalidRange { start, end });
        }
        let spans = self.scan(Signal::Spans, 0, u64::MAX)?;
        let mut by_trace: BTreeMap<TraceId, Vec<&StoredSpan>> = BTreeMap::new();
        for rec in &spans {
            if let StoredRecord::Span(s) = rec {
                by_trace.entry(s.span.context.trace_id()).or_default().push(s);
            }
        }
        let mut out = Vec::new();
        for (trace_id, members) in by_trace {
            let ids: HashSet<SpanId> = members.iter().map(|s| s.span.context.span_id()).collect();
            let root = members
                .iter()
                .filter(|s| s.span.parent_span_id.is_none())
                .filter(|s| s.span.start_unix_nano >= start && s.span.start_unix_nano < end)
                .min_by_key(|s| (s.span.start_unix_nano, s.span.context.span_id()));
            let Some(root) = root else { continue };
            let orphan_count = members
                .iter()
                .filter(|s| s.span.parent_span_id.is_some_and(|p| !ids.contains(&p)))
                .count() as u64;
            out.push(TraceSummary {
                trace_id,
                root_name: root.span.name.clone(),
                start_unix_nano: root.span.start_unix_nano,
                end_unix_nano: root.span.end_unix_nano,
                span_count: ids.len() as u64,
                orphan_count,
            });
        }
        out.sort_by_key(|t| (t.start_unix_nano, t.trace_id));
        Ok(out)
    }
}

/// Keeps one record per (trace, span): the closed version when one exists,
/// otherwise the last open one, at the position of the first occurrence.
pub fn collapse_spans(records: Vec<StoredRecord>) -> Vec<StoredRecord> {
    let mut slot: HashMap<(TraceId, SpanId), usize> = HashMap::new();
    let mut out: Vec<StoredRecord> = Vec::with_capacity(records.len());
    for rec in records {
        let StoredRecord::Span(s) = &rec else {
            out.push(rec);
            continue;
        };
        let key = (s.span.context.trace_id(), s.span.context.span_id());
        match slot.get(&key) {
            Some(&i) => {
                let keep_existing = matches!(&out[i], StoredRecord::Span(e) if e.span.is_closed())
                    && !s.span.is_closed();
                if !keep_existing {
                    out[i] = rec;
                }
            }
            None => {
                slot.insert(key, out.len());
                out.push(rec);
            }
        }
    }
    out
}
