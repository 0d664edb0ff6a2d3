//! Span state shared between separate CLI invocations.
//!
//! Newline-delimited JSON; each state change appends a `{handle, span, exported}`
//! record and the last record for a handle wins. Access is serialized with an
//! advisory lock on the file.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::SpanLifecycleError;
use crate::model::{Span, SpanStatus};

pub const SPAN_FILE_NAME: &str = "spans.jsonl";
pub const DEFAULT_STATE_DIR_ENV: &str = "SCITRACE_STATE_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub handle: String,
    pub span: Span,
    #[serde(default)]
    pub exported: bool,
}

#[derive(Debug, Clone)]
pub struct SpanFile {
    path: PathBuf,
}

impl SpanFile {
    pub fn new(state_dir: &Path) -> Self {
        Self {
            path: state_dir.join(SPAN_FILE_NAME),
        }
    }

    /// `$SCITRACE_STATE_DIR`, else the system temp directory.
    pub fn from_env(env: &dyn crate::env::Environment) -> Self {
        let dir = env
            .var(DEFAULT_STATE_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("scitrace"));
        Self::new(&dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn state_err(&self, source: io::Error) -> SpanLifecycleError {
        SpanLifecycleError::State {
            path: self.path.clone(),
            source,
        }
    }

    fn open_locked(&self) -> Result<File, SpanLifecycleError> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| self.state_err(e))?;
        }
        let file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&self.path)
            .map_err(|e| self.state_err(e))?;
        file.lock().map_err(|e| self.state_err(e))?;
        Ok(file)
    }

    fn read_latest(file: &mut File) -> io::Result<IndexMap<String, SpanRecord>> {
        file.seek(SeekFrom::Start(0))?;
        let mut latest = IndexMap::new();
        for line in BufReader::new(&*file).lines() {
            let line = line?;
            // A torn trailing line from an interrupted writer is skipped.
            if let Ok(rec) = serde_json::from_str::<SpanRecord>(&line) {
                latest.insert(rec.handle.clone(), rec);
            }
        }
        Ok(latest)
    }

    fn append(file: &mut File, records: &[SpanRecord]) -> io::Result<()> {
        let mut buf = Vec::new();
        for rec in records {
            serde_json::to_writer(&mut buf, rec).map_err(io::Error::other)?;
            buf.push(b'\n');
        }
        file.write_all(&buf)?;
        file.sync_data()
    }

    pub(super) fn record_open(&self, span: &Span) -> Result<(), SpanLifecycleError> {
        let mut file = self.open_locked()?;
        let rec = SpanRecord {
            handle: span.context.span_id().to_hex(),
            span: span.clone(),
            exported: false,
        };
        Self::append(&mut file, &[rec]).map_err(|e| self.state_err(e))
    }

    pub(super) fn close(
        &self,
        handle: &str,
        status: SpanStatus,
        now: u64,
    ) -> Result<Span, SpanLifecycleError> {
        let mut file = self.open_locked()?;
        let latest = Self::read_latest(&mut file).map_err(|e| self.state_err(e))?;
        let mut rec = latest
            .get(handle)
            .cloned()
            .ok_or_else(|| SpanLifecycleError::UnknownSpan(handle.to_owned()))?;
        if rec.span.is_closed() {
            return Err(SpanLifecycleError::DoubleEnd(handle.to_owned()));
        }
        rec.span.end_unix_nano = Some(now.max(rec.span.start_unix_nano));
        rec.span.status = status;
        Self::append(&mut file, std::slice::from_ref(&rec)).map_err(|e| self.state_err(e))?;
        Ok(rec.span)
    }

    /// Latest state of every span in the file.
    pub fn spans(&self) -> Result<Vec<SpanRecord>, SpanLifecycleError> {
        let mut file = self.open_locked()?;
        let latest = Self::read_latest(&mut file).map_err(|e| self.state_err(e))?;
        Ok(latest.into_values().collect())
    }

    /// Closed spans not yet acknowledged by a collector.
    pub fn pending_exports(&self) -> Result<Vec<Span>, SpanLifecycleError> {
        Ok(self
            .spans()?
            .into_iter()
            .filter(|r| r.span.is_closed() && !r.exported)
            .map(|r| r.span)
            .collect())
    }

    pub fn mark_exported(&self, spans: &[Span]) -> Result<(), SpanLifecycleError> {
        let mut file = self.open_locked()?;
        let latest = Self::read_latest(&mut file).map_err(|e| self.state_err(e))?;
        let updates: Vec<SpanRecord> = spans
            .iter()
            .filter_map(|s| latest.get(&s.context.span_id().to_hex()))
            .filter(|r| !r.exported)
            .map(|r| SpanRecord {
                exported: true,
                ..r.clone()
            })
            .collect();
        Self::append(&mut file, &updates).map_err(|e| self.state_err(e))
    }
}
