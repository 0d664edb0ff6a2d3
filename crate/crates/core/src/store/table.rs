//! Tabular query results, the shape analysis tools and notebooks consume.
//!
//! Leading columns are fixed per signal; one string column per custom attribute
//! key present in the result follows, sorted by key. Absent values are null.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::record::{Signal, StoredRecord};
use crate::model::{SpanId, SpanKind, TraceId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Int,
    Float,
    String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

pub const TIME: &str = "time_unix_nano";
pub const NAME: &str = "name";
pub const VALUE: &str = "value";
pub const DURATION: &str = "duration";
pub const JOB_ID: &str = "job.id";
pub const JOB_UID: &str = "job.uid";
pub const HOST_NAME: &str = "host.name";
pub const JOB_ARRAY_TASK_ID: &str = "job.array_task_id";
pub const UNIT: &str = "unit";
pub const KIND: &str = "kind";
pub const TRACE_ID: &str = "trace_id";
pub const SPAN_ID: &str = "span_id";
pub const PARENT_SPAN_ID: &str = "parent_span_id";
pub const STATUS: &str = "status";
pub const END_TIME: &str = "end_time_unix_nano";

const METRIC_COLUMNS: [(&str, ColumnType); 10] = [
    (TIME, ColumnType::Int),
    (NAME, ColumnType::String),
    (VALUE, ColumnType::Float),
    (JOB_ID, ColumnType::Int),
    (JOB_UID, ColumnType::Int),
    (HOST_NAME, ColumnType::String),
    (JOB_ARRAY_TASK_ID, ColumnType::Int),
    (UNIT, ColumnType::String),
    (KIND, ColumnType::String),
    (TRACE_ID, ColumnType::String),
];

const SPAN_COLUMNS: [(&str, ColumnType); 13] = [
    (TIME, ColumnType::Int),
    (NAME, ColumnType::String),
    (DURATION, ColumnType::Float),
    (JOB_ID, ColumnType::Int),
    (JOB_UID, ColumnType::Int),
    (HOST_NAME, ColumnType::String),
    (JOB_ARRAY_TASK_ID, ColumnType::Int),
    (TRACE_ID, ColumnType::String),
    (SPAN_ID, ColumnType::String),
    (PARENT_SPAN_ID, ColumnType::String),
    (KIND, ColumnType::String),
    (STATUS, ColumnType::String),
    (END_TIME, ColumnType::Int),
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TableError {
    #[error("result table is missing columns: {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("row {row} column {column:?}: {reason}")]
    Cell {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Value>>,
}

fn opt<T: Into<Value>>(v: Option<T>) -> Value {
    v.map(Into::into).unwrap_or(Value::Null)
}

fn float(v: f64) -> Value {
    serde_json::Number::from_f64(v)
        .map(Value::Number)
        .unwrap_or(Value::Null)
}

impl ResultTable {
    pub fn fixed_columns(signal: Signal) -> Vec<Column> {
        let fixed: &[(&str, ColumnType)] = match signal {
            Signal::Metrics => &METRIC_COLUMNS,
            Signal::Spans => &SPAN_COLUMNS,
        };
        fixed
            .iter()
            .map(|(n, t)| Column {
                name: (*n).to_owned(),
                ty: *t,
            })
            .collect()
    }

    /// Builds the table from records already filtered and ordered.
    pub fn from_records(signal: Signal, records: &[StoredRecord]) -> Self {
        let mut columns = Self::fixed_columns(signal);
        let attr_keys: BTreeSet<&str> = records
            .iter()
            .flat_map(|r| r.custom_attribute_keys())
            .filter(|k| !columns.iter().any(|c| c.name == *k))
            .collect();
        columns.extend(attr_keys.iter().map(|k| Column {
            name: (*k).to_owned(),
            ty: ColumnType::String,
        }));

        let rows = records
            .iter()
            .map(|rec| {
                let mut row = match rec {
                    StoredRecord::Metric(m) => {
                        let s = &m.sample;
                        vec![
                            Value::from(s.time_unix_nano),
                            Value::from(s.name.clone()),
                            float(s.value.as_f64()),
                            Value::from(s.job.job_id),
                            Value::from(s.job.uid),
                            Value::from(s.job.hostname.clone()),
                            opt(s.job.array_task_id),
                            Value::from(s.unit.clone()),
                            Value::from(s.kind.as_str()),
                            opt(s.trace_id.map(|t| t.to_hex())),
                        ]
                    }
                    StoredRecord::Span(st) => {
                        let s = &st.span;
                        let job = s.job.as_ref();
                        vec![
                            Value::from(s.start_unix_nano),
                            Value::from(s.name.clone()),
                            s.duration_nanos().map(|d| float(d as f64)).unwrap_or(Value::Null),
                            opt(job.map(|j| j.job_id)),
                            opt(job.map(|j| j.uid)),
                            opt(job.map(|j| j.hostname.clone())),
                            opt(job.and_then(|j| j.array_task_id)),
                            Value::from(s.context.trace_id().to_hex()),
                            Value::from(s.context.span_id().to_hex()),
                            opt(s.parent_span_id.map(|p| p.to_hex())),
                            Value::from(s.kind.as_str()),
                            Value::from(s.status.as_str()),
                            opt(s.end_unix_nano),
                        ]
                    }
                };
                row.extend(
                    attr_keys
                        .iter()
                        .map(|k| opt(rec.custom_attribute(k).map(str::to_owned))),
                );
                row
            })
            .collect();
        ResultTable { columns, rows }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    fn require(&self, names: &[&str]) -> Result<Vec<usize>, TableError> {
        let missing: Vec<String> = names
            .iter()
            .filter(|n| self.column_index(n).is_none())
            .map(|n| (*n).to_owned())
            .collect();
        if !missing.is_empty() {
            return Err(TableError::MissingColumns(missing));
        }
        Ok(names
            .iter()
            .map(|n| self.column_index(n).expect("checked"))
            .collect())
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), TableError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .map_err(|e| TableError::Csv(e.to_string()))?;
        for row in &self.rows {
            w.write_record(row.iter().map(|cell| match cell {
                Value::Null => String::new(),
                Value::String(s) => s.clone(),
                other => other.to_string(),
            }))
            .map_err(|e| TableError::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| TableError::Csv(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv of utf-8 cells")
    }

    /// Parses a CSV produced by [`write_csv`](Self::write_csv). Column types come
    /// from the fixed column set; attribute columns are strings.
    pub fn from_csv<R: std::io::Read>(signal: Signal, input: R) -> Result<Self, TableError> {
        let fixed = Self::fixed_columns(signal);
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers().map_err(|e| TableError::Csv(e.to_string()))?.clone();
        let columns: Vec<Column> = headers
            .iter()
            .map(|h| Column {
                name: h.to_owned(),
                ty: fixed
                    .iter()
                    .find(|c| c.name == h)
                    .map(|c| c.ty)
                    .unwrap_or(ColumnType::String),
            })
            .collect();
        let mut rows = Vec::new();
        for (ri, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| TableError::Csv(e.to_string()))?;
            let row = rec
                .iter()
                .zip(&columns)
                .map(|(cell, col)| {
                    if cell.is_empty() {
                        return Ok(Value::Null);
                    }
                    let bad = |reason: String| TableError::Cell {
                        row: ri,
                        column: col.name.clone(),
                        reason,
                    };
                    match col.ty {
                        ColumnType::String => Ok(Value::from(cell)),
                        ColumnType::Int => cell
                            .parse::<u64>()
                            .map(Value::from)
                            .map_err(|e| bad(e.to_string())),
                        ColumnType::Float => cell
                            .parse::<f64>()
                            .map(float)
                            .map_err(|e| bad(e.to_string())),
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(ResultTable { columns, rows })
    }
}

/// Identity of a job as it appears in result rows.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobKey {
    pub uid: u32,
    pub job_id: u64,
    pub array_task_id: Option<u64>,
    pub hostname: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub time_unix_nano: u64,
    pub name: String,
    pub value: f64,
    pub job: JobKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanRow {
    pub start_unix_nano: u64,
    pub end_unix_nano: Option<u64>,
    pub name: String,
    pub kind: SpanKind,
    pub trace_id: TraceId,
    pub span_id: SpanId,
    pub parent_span_id: Option<SpanId>,
    pub job: Option<JobKey>,
}

fn cell_u64(row: &[Value], idx: usize, ri: usize, col: &str) -> Result<Option<u64>, TableError> {
    match &row[idx] {
        Value::Null => Ok(None),
        v => v.as_u64().map(Some).ok_or_else(|| TableError::Cell {
            row: ri,
            column: col.to_owned(),
            reason: format!("expected unsigned integer, found {v}"),
        }),
    }
}

fn cell_str(row: &[Value], idx: usize) -> Option<&str> {
    row[idx].as_str()
}

fn job_key(row: &[Value], idx: &[usize], ri: usize) -> Result<Option<JobKey>, TableError> {
    let job_id = cell_u64(row, idx[0], ri, JOB_ID)?;
    let uid = cell_u64(row, idx[1], ri, JOB_UID)?;
    let host = cell_str(row, idx[2]);
    let task = cell_u64(row, idx[3], ri, JOB_ARRAY_TASK_ID)?;
    Ok(match (job_id, uid, host) {
        (Some(job_id), Some(uid), Some(host)) => Some(JobKey {
            uid: uid as u32,
            job_id,
            array_task_id: task,
            hostname: host.to_owned(),
        }),
        _ => None,
    })
}

impl ResultTable {
    pub fn metric_rows(&self) -> Result<Vec<MetricRow>, TableError> {
        let idx = self.require(&[TIME, NAME, VALUE, JOB_ID, JOB_UID, HOST_NAME, JOB_ARRAY_TASK_ID])?;
        self.rows
            .iter()
            .enumerate()
            .map(|(ri, row)| {
                let missing = |c: &str| TableError::Cell {
                    row: ri,
                    column: c.to_owned(),
                    reason: "missing value".into(),
                };
                Ok(MetricRow {
                    time_unix_nano: cell_u64(row, idx[0], ri, TIME)?.ok_or_else(|| missing(TIME))?,
                    name: cell_str(row, idx[1]).ok_or_else(|| missing(NAME))?.to_owned(),
                    value: row[idx[2]].as_f64().ok_or_else(|| missing(VALUE))?,
                    job: job_key(row, &idx[3..7], ri)?.ok_or_else(|| missing(JOB_ID))?,
                })
            })
            .collect()
    }

    pub fn span_rows(&self) -> Result<Vec<SpanRow>, TableError> {
        let idx = self.require(&[
            TIME, NAME, JOB_ID, JOB_UID, HOST_NAME, JOB_ARRAY_TASK_ID, TRACE_ID, SPAN_ID,
            PARENT_SPAN_ID, KIND, END_TIME,
        ])?;
        self.rows
            .iter()
            .enumerate()
            .map(|(ri, row)| {
                let bad = |c: &str, reason: String| TableError::Cell {
                    row: ri,
                    column: c.to_owned(),
                    reason,
                };
                let kind_s = cell_str(row, idx[9]).unwrap_or_default();
                let parent = match cell_str(row, idx[8]) {
                    Some(p) => Some(SpanId::from_hex(p).map_err(|e| bad(PARENT_SPAN_ID, e.to_string()))?),
                    None => None,
                };
                Ok(SpanRow {
                    start_unix_nano: cell_u64(row, idx[0], ri, TIME)?
                        .ok_or_else(|| bad(TIME, "missing value".into()))?,
                    end_unix_nano: cell_u64(row, idx[10], ri, END_TIME)?,
                    name: cell_str(row, idx[1]).unwrap_or_default().to_owned(),
                    kind: SpanKind::parse(kind_s).ok_or_else(|| bad(KIND, format!("unknown kind {kind_s:?}")))?,
                    trace_id: TraceId::from_hex(cell_str(row, idx[6]).unwrap_or_default())
                        .map_err(|e| bad(TRACE_ID, e.to_string()))?,
                    span_id: SpanId::from_hex(cell_str(row, idx[7]).unwrap_or_default())
                        .map_err(|e| bad(SPAN_ID, e.to_string()))?,
                    parent_span_id: parent,
                    job: job_key(row, &idx[2..6], ri)?,
                })
            })
            .collect()
    }
}
