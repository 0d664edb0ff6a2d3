use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use serde::Serialize;
use serde_json::Value;
use tracing::{debug, info, warn};

use super::config::{BatchConfig, ConfigError, Filter, PipelineConfig};
use crate::clock::Clock;
use crate::model::wire::{self, RecordError, SchemaError};
use crate::model::{MetricRegistry, RegistryError};
use crate::store::{Signal, Store, StoreError, StoredRecord};

/// Outcome of running a record through the filter stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop { rule_id: String },
}

/// Drops the record iff some rule's key is present on it and the value matches.
pub fn apply_filter(record: &StoredRecord, filters: &[Filter]) -> FilterDecision {
    if filters.iter().all(|f| f.rules.is_empty()) {
        return FilterDecision::Keep;
    }
    let attrs = record.attributes();
    for rule in filters.iter().flat_map(|f| &f.rules) {
        if let Some(v) = attrs.get(&rule.key) {
            if rule.regex.is_match(v) {
                return FilterDecision::Drop {
                    rule_id: rule.id.clone(),
                };
            }
        }
    }
    FilterDecision::Keep
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestResult {
    pub accepted: usize,
    pub rejected: usize,
    pub duplicates: usize,
    pub dropped: usize,
    pub errors: Vec<RecordError>,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("collector is shut down")]
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FlushTrigger {
    Size,
    Timer,
    Shutdown,
    /// Explicit [`Collector::flush`] call.
    Request,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CollectorStats {
    pub requests: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub duplicates: u64,
    pub dropped: u64,
    pub unavailable: u64,
    pub flushes: BTreeMap<FlushTrigger, u64>,
    pub records_written: u64,
    pub write_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShutdownReport {
    pub stats: CollectorStats,
    /// Accepted records that never reached the store.
    pub unflushed: usize,
}

enum Msg {
    Records(Vec<StoredRecord>),
    Flush(Sender<()>),
    Shutdown(Sender<usize>),
}

struct Shared {
    filters: Vec<Filter>,
    registry: MetricRegistry,
    clock: Arc<dyn Clock>,
    store: Arc<Store>,
    /// Identities of records stored or on their way to the store.
    seen: Mutex<HashSet<String>>,
    tx: Mutex<Option<Sender<Msg>>>,
    pending: AtomicUsize,
    max_pending: usize,
    inject_unavailable: AtomicU32,
    store_failing: std::sync::atomic::AtomicBool,
    stats: Mutex<CollectorStats>,
}

/// Receiver, processors and store exporter without the HTTP layer.
#[derive(Clone)]
pub struct Collector {
    shared: Arc<Shared>,
    writer: Arc<Mutex<Option<JoinHandle<()>>>>,
    shutdown_deadline: Duration,
}

impl std::fmt::Debug for Collector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Collector")
            .field("store", &self.shared.store.dir())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("binding {address}: {source}")]
    Bind {
        address: String,
        #[source]
        source: std::io::Error,
    },
}

impl Collector {
    pub fn start(cfg: &PipelineConfig, clock: Arc<dyn Clock>) -> Result<Self, StartError> {
        cfg.validate()?;
        let store = Store::open_with_policy(&cfg.store_dir, cfg.segment_policy.unwrap_or_default())?;
        Self::with_store(cfg, Arc::new(store), clock)
    }

    /// Runs the pipeline against an already open store.
    pub fn with_store(cfg: &PipelineConfig, store: Arc<Store>, clock: Arc<dyn Clock>) -> Result<Self, StartError> {
        let filters = cfg.compile_filters()?;
        let mut seen = store.identities(Signal::Metrics)?;
        seen.extend(store.identities(Signal::Spans)?);
        let (tx, rx) = unbounded();
        let shared = Arc::new(Shared {
            filters,
            registry: MetricRegistry::standard(),
            clock,
            store,
            seen: Mutex::new(seen),
            tx: Mutex::new(Some(tx)),
            pending: AtomicUsize::new(0),
            max_pending: cfg.max_pending_records,
            inject_unavailable: AtomicU32::new(0),
            store_failing: Default::default(),
            stats: Mutex::new(CollectorStats::default()),
        });
        let writer = BatchWriter {
            shared: shared.clone(),
            batch: cfg.batch(),
            retry_base: cfg.store_retry_base,
            shutdown_deadline: cfg.shutdown_deadline,
        };
        let handle = std::thread::Builder::new()
            .name("scitrace-batcher".into())
            .spawn(move || writer.run(rx))
            .expect("spawning batch writer");
        Ok(Self {
            shared,
            writer: Arc::new(Mutex::new(Some(handle))),
            shutdown_deadline: cfg.shutdown_deadline,
        })
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.shared.store
    }

    pub fn stats(&self) -> CollectorStats {
        self.shared.stats.lock().expect("stats lock").clone()
    }

    /// The next `n` ingest calls answer as if the store were unavailable.
    pub fn inject_unavailable(&self, n: u32) {
        self.shared.inject_unavailable.store(n, Ordering::SeqCst);
    }

    fn check_available(&self) -> Result<(), IngestError> {
        let s = &self.shared;
        let injected = s
            .inject_unavailable
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        let reason = if injected {
            Some("injected outage".to_owned())
        } else if s.store_failing.load(Ordering::SeqCst) {
            Some("store writes are failing".to_owned())
        } else if s.pending.load(Ordering::SeqCst) >= s.max_pending {
            Some(format!("{} records awaiting the writer", s.pending.load(Ordering::SeqCst)))
        } else {
            None
        };
        match reason {
            Some(r) => {
                s.stats.lock().expect("stats lock").unavailable += 1;
                Err(IngestError::Unavailable(r))
            }
            None => Ok(()),
        }
    }

    /// Validates a payload, stamps receive time, filters, deduplicates and
    /// queues the surviving records for the writer.
    pub fn ingest(&self, signal: Signal, payload: &Value) -> Result<IngestResult, IngestError> {
        self.shared.stats.lock().expect("stats lock").requests += 1;
        self.check_available()?;
        let received = self.shared.clock.now_unix_nano();
        let decoded: Vec<Result<StoredRecord, RecordError>> = match signal {
            Signal::Metrics => wire::decode_metrics(payload)?
                .into_iter()
                .enumerate()
                .map(|(index, r)| {
                    let sample = r?;
                    self.shared
                        .registry
                        .check(&sample.name, &sample.unit, sample.kind)
                        .map_err(|e| RecordError {
                            index,
                            field: match e {
                                RegistryError::UnitMismatch { .. } => "unit",
                                RegistryError::KindMismatch { .. } => "kind",
                                _ => "name",
                            }
                            .to_owned(),
                            reason: e.to_string(),
                        })?;
                    Ok(StoredRecord::metric(sample, received))
                })
                .collect(),
            Signal::Spans => wire::decode_spans(payload)?
                .into_iter()
                .map(|r| r.map(|span| StoredRecord::span(span, received)))
                .collect(),
        };

        let mut result = IngestResult::default();
        let mut kept = Vec::new();
        for rec in decoded {
            match rec {
                Err(e) => {
                    result.rejected += 1;
                    result.errors.push(e);
                }
                Ok(rec) => match apply_filter(&rec, &self.shared.filters) {
                    FilterDecision::Drop { rule_id } => {
                        debug!(rule = %rule_id, id = rec.id(), "record dropped by filter");
                        result.dropped += 1;
                    }
                    FilterDecision::Keep => kept.push(rec),
                },
            }
        }

        {
            // Holding the dedup lock while enqueueing keeps store order equal to
            // acceptance order across concurrent requests.
            let mut seen = self.shared.seen.lock().expect("dedup lock");
            let fresh: Vec<StoredRecord> = kept
                .into_iter()
                .filter(|r| {
                    let new = seen.insert(r.id().to_owned());
                    if !new {
                        result.duplicates += 1;
                    }
                    new
                })
                .collect();
            result.accepted = fresh.len();
            if !fresh.is_empty() {
                let tx = self.shared.tx.lock().expect("sender lock");
                let Some(tx) = tx.as_ref() else {
                    for r in &fresh {
                        seen.remove(r.id());
                    }
                    return Err(IngestError::Closed);
                };
                self.shared.pending.fetch_add(fresh.len(), Ordering::SeqCst);
                tx.send(Msg::Records(fresh)).map_err(|_| IngestError::Closed)?;
            }
        }

        let mut stats = self.shared.stats.lock().expect("stats lock");
        stats.accepted += result.accepted as u64;
        stats.rejected += result.rejected as u64;
        stats.duplicates += result.duplicates as u64;
        stats.dropped += result.dropped as u64;
        Ok(result)
    }

    /// Blocks until everything accepted so far is in the store (or the writer
    /// is retrying a failing store).
    pub fn flush(&self) {
        let (ack_tx, ack_rx) = bounded(1);
        let sent = self
            .shared
            .tx
            .lock()
            .expect("sender lock")
            .as_ref()
            .map(|tx| tx.send(Msg::Flush(ack_tx)).is_ok())
            .unwrap_or(false);
        if sent {
            let _ = ack_rx.recv();
        }
    }

    /// Stops accepting input, flushes the remaining buffer within the shutdown
    /// deadline and reports what could not be written.
    pub fn shutdown(&self) -> ShutdownReport {
        let tx = self.shared.tx.lock().expect("sender lock").take();
        let mut unflushed = 0;
        if let Some(tx) = tx {
            let (ack_tx, ack_rx) = bounded(1);
            if tx.send(Msg::Shutdown(ack_tx)).is_ok() {
                unflushed = ack_rx
                    .recv_timeout(self.shutdown_deadline + Duration::from_secs(5))
                    .unwrap_or_else(|_| self.shared.pending.load(Ordering::SeqCst));
            }
        }
        if let Some(h) = self.writer.lock().expect("writer lock").take() {
            let _ = h.join();
        }
        let report = ShutdownReport {
            stats: self.stats(),
            unflushed,
        };
        info!(
            written = report.stats.records_written,
            unflushed = report.unflushed,
            "collector stopped"
        );
        report
    }
}

struct BatchWriter {
    shared: Arc<Shared>,
    batch: BatchConfig,
    retry_base: Duration,
    shutdown_deadline: Duration,
}

impl BatchWriter {
    fn run(self, rx: Receiver<Msg>) {
        let mut buffer: Vec<StoredRecord> = Vec::new();
        let mut oldest: Option<Instant> = None;
        loop {
            let msg = match oldest {
                Some(t0) => {
                    let wait = self.batch.max_delay.saturating_sub(t0.elapsed());
                    match rx.recv_timeout(wait) {
                        Ok(m) => Some(m),
                        Err(RecvTimeoutError::Timeout) => None,
                        Err(RecvTimeoutError::Disconnected) => return,
                    }
                }
                None => match rx.recv() {
                    Ok(m) => Some(m),
                    Err(_) => return,
                },
            };
            match msg {
                None => {
                    self.flush(&mut buffer, FlushTrigger::Timer, None);
                    oldest = None;
                }
                Some(Msg::Records(recs)) => {
                    if buffer.is_empty() {
                        oldest = Some(Instant::now());
                    }
                    buffer.extend(recs);
                    while buffer.len() >= self.batch.max_records {
                        let rest = buffer.split_off(self.batch.max_records);
                        let mut chunk = std::mem::replace(&mut buffer, rest);
                        self.flush(&mut chunk, FlushTrigger::Size, None);
                    }
                    if buffer.is_empty() {
                        oldest = None;
                    }
                }
                Some(Msg::Flush(ack)) => {
                    self.flush_chunks(&mut buffer, FlushTrigger::Request, None);
                    oldest = None;
                    let _ = ack.send(());
                }
                Some(Msg::Shutdown(ack)) => {
                    let deadline = Instant::now() + self.shutdown_deadline;
                    let left = self.flush_chunks(&mut buffer, FlushTrigger::Shutdown, Some(deadline));
                    if left > 0 {
                        warn!(unflushed = left, "shutdown deadline passed with records unwritten");
                    }
                    let _ = ack.send(left);
                    return;
                }
            }
        }
    }

    fn flush_chunks(&self, buffer: &mut Vec<StoredRecord>, trigger: FlushTrigger, deadline: Option<Instant>) -> usize {
        let mut left = 0;
        while !buffer.is_empty() {
            let rest = buffer.split_off(buffer.len().min(self.batch.max_records));
            let mut chunk = std::mem::replace(buffer, rest);
            left += self.flush(&mut chunk, trigger, deadline);
            if left > 0 {
                left += buffer.len();
                buffer.clear();
                break;
            }
        }
        left
    }

    /// Writes the batch, retrying with backoff until it succeeds or the
    /// deadline passes. Returns the number of records left unwritten.
    fn flush(&self, batch: &mut Vec<StoredRecord>, trigger: FlushTrigger, deadline: Option<Instant>) -> usize {
        if batch.is_empty() {
            return 0;
        }
        let mut attempt = 0u32;
        loop {
            match self.shared.store.append(batch) {
                Ok(n) => {
                    self.shared.store_failing.store(false, Ordering::SeqCst);
                    self.shared.pending.fetch_sub(n, Ordering::SeqCst);
                    let mut stats = self.shared.stats.lock().expect("stats lock");
                    *stats.flushes.entry(trigger).or_insert(0) += 1;
                    stats.records_written += n as u64;
                    debug!(?trigger, records = n, "flushed batch");
                    batch.clear();
                    return 0;
                }
                Err(e) => {
                    self.shared.store_failing.store(true, Ordering::SeqCst);
                    self.shared.stats.lock().expect("stats lock").write_failures += 1;
                    let delay = self
                        .retry_base
                        .saturating_mul(1 << attempt.min(6))
                        .min(Duration::from_secs(5));
                    warn!(error = %e, attempt, ?delay, "store write failed, retrying");
                    if deadline.is_some_and(|d| Instant::now() + delay > d) {
                        return batch.len();
                    }
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}
