//! OTLP-compatible JSON wire format for metric and trace payloads.
//!
//! Metrics document:
//! `{"resource":{"attributes":{...}},"metrics":[{"name","unit","kind","points":[{"timeUnixNano","value","traceId"}]}]}`
//!
//! Traces document:
//! `{"resource":{"attributes":{...}},"spans":[{"name","traceId","spanId","parentSpanId","kind","startTimeUnixNano","endTimeUnixNano","status","attributes"}]}`
//!
//! Decoding is two-level: a malformed document shape is a [`SchemaError`], while
//! a malformed individual point or span becomes a [`RecordError`] so the rest of
//! the payload can still be accepted.

use serde::Serialize;
use serde_json::{Map, Value};

use super::{
    JobIdentity, MetricKind, MetricSample, MetricValue, Span, SpanId, SpanKind,
    SpanStatus, TagSet, TraceContext, TraceFlags, TraceId,
};

pub const HOST_NAME: &str = "host.name";
pub const JOB_UID: &str = "job.uid";
pub const JOB_ID: &str = "job.id";
pub const JOB_ARRAY_TASK_ID: &str = "job.array_task_id";

pub const METRICS_PATH: &str = "/v1/metrics";
pub const TRACES_PATH: &str = "/v1/traces";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("schema violation at `{field}`: {reason}")]
pub struct SchemaError {
    pub field: String,
    pub reason: String,
}

impl SchemaError {
    fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("record {index} rejected at `{field}`: {reason}")]
pub struct RecordError {
    pub index: usize,
    pub field: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct WireResource {
    pub attributes: Map<String, Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WirePoint {
    #[serde(rename = "timeUnixNano")]
    pub time_unix_nano: String,
    pub value: Value,
    #[serde(rename = "traceId")]
    pub trace_id: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WireMetric {
    pub name: String,
    pub unit: String,
    pub kind: &'static str,
    pub points: Vec<WirePoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsDocument {
    pub resource: WireResource,
    pub metrics: Vec<WireMetric>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WireSpan {
    pub name: String,
    #[serde(rename = "traceId")]
    pub trace_id: String,
    #[serde(rename = "spanId")]
    pub span_id: String,
    #[serde(rename = "parentSpanId")]
    pub parent_span_id: Option<String>,
    pub kind: &'static str,
    #[serde(rename = "startTimeUnixNano")]
    pub start_time_unix_nano: String,
    #[serde(rename = "endTimeUnixNano")]
    pub end_time_unix_nano: Option<String>,
    pub status: &'static str,
    pub attributes: Map<String, Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TracesDocument {
    pub resource: WireResource,
    pub spans: Vec<WireSpan>,
}

pub fn resource_attributes(job: Option<&JobIdentity>, tags: &TagSet) -> Map<String, Value> {
    let mut attrs = Map::new();
    if let Some(job) = job {
        attrs.insert(HOST_NAME.into(), Value::from(job.hostname.clone()));
        attrs.insert(JOB_UID.into(), Value::from(job.uid));
        attrs.insert(JOB_ID.into(), Value::from(job.job_id));
        attrs.insert(
            JOB_ARRAY_TASK_ID.into(),
            job.array_task_id.map(Value::from).unwrap_or(Value::Null),
        );
    }
    for (k, v) in tags.iter() {
        attrs.insert(k.to_owned(), Value::from(v));
    }
    attrs
}

fn tags_to_map(tags: &TagSet) -> Map<String, Value> {
    tags.iter()
        .map(|(k, v)| (k.to_owned(), Value::from(v)))
        .collect()
}

/// Encodes samples into one document per run of samples sharing job and tags.
pub fn encode_metrics(samples: &[MetricSample]) -> Vec<MetricsDocument> {
    let mut docs: Vec<(JobIdentity, TagSet, MetricsDocument)> = Vec::new();
    for s in samples {
        let need_new = match docs.last() {
            Some((job, tags, _)) => *job != s.job || *tags != s.tags,
            None => true,
        };
        if need_new {
            docs.push((
                s.job.clone(),
                s.tags.clone(),
                MetricsDocument {
                    resource: WireResource {
                        attributes: resource_attributes(Some(&s.job), &s.tags),
                    },
                    metrics: Vec::new(),
                },
            ));
        }
        let doc = &mut docs.last_mut().expect("pushed above").2;
        let point = WirePoint {
            time_unix_nano: s.time_unix_nano.to_string(),
            value: s.value.to_json(),
            trace_id: s.trace_id.map(|t| t.to_hex()),
        };
        match doc
            .metrics
            .iter_mut()
            .find(|m| m.name == s.name && m.unit == s.unit && m.kind == s.kind.as_str())
        {
            Some(m) => m.points.push(point),
            None => doc.metrics.push(WireMetric {
                name: s.name.clone(),
                unit: s.unit.clone(),
                kind: s.kind.as_str(),
                points: vec![point],
            }),
        }
    }
    docs.into_iter().map(|(_, _, d)| d).collect()
}

/// Encodes spans into one document per run of spans sharing a job.
pub fn encode_spans(spans: &[Span]) -> Vec<TracesDocument> {
    let mut docs: Vec<(Option<JobIdentity>, TracesDocument)> = Vec::new();
    for s in spans {
        if docs.last().map(|(job, _)| *job != s.job).unwrap_or(true) {
            docs.push((
                s.job.clone(),
                TracesDocument {
                    resource: WireResource {
                        attributes: resource_attributes(s.job.as_ref(), &TagSet::new()),
                    },
                    spans: Vec::new(),
                },
            ));
        }
        docs.last_mut().expect("pushed above").1.spans.push(WireSpan {
            name: s.name.clone(),
            trace_id: s.context.trace_id().to_hex(),
            span_id: s.context.span_id().to_hex(),
            parent_span_id: s.parent_span_id.map(|p| p.to_hex()),
            kind: s.kind.as_str(),
            start_time_unix_nano: s.start_unix_nano.to_string(),
            end_time_unix_nano: s.end_unix_nano.map(|e| e.to_string()),
            status: s.status.as_str(),
            attributes: tags_to_map(&s.attributes),
        });
    }
    docs.into_iter().map(|(_, d)| d).collect()
}

struct DecodedResource {
    job: Option<JobIdentity>,
    tags: TagSet,
}

fn field_u64(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
}

fn decode_resource(root: &Map<String, Value>, require_job: bool) -> Result<DecodedResource, SchemaError> {
    let resource = root
        .get("resource")
        .ok_or_else(|| SchemaError::new("resource", "missing"))?
        .as_object()
        .ok_or_else(|| SchemaError::new("resource", "expected object"))?;
    let attrs = match resource.get("attributes") {
        Some(Value::Object(a)) => a.clone(),
        Some(_) => return Err(SchemaError::new("resource.attributes", "expected object")),
        None => Map::new(),
    };

    let has_job = attrs.contains_key(JOB_ID);
    let job = if has_job || require_job {
        let f = |k: &str| format!("resource.attributes.{k}");
        let hostname = match attrs.get(HOST_NAME) {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(_) => return Err(SchemaError::new(f(HOST_NAME), "expected non-empty string")),
            None => return Err(SchemaError::new(f(HOST_NAME), "missing")),
        };
        let uid = attrs
            .get(JOB_UID)
            .ok_or_else(|| SchemaError::new(f(JOB_UID), "missing"))
            .and_then(|v| {
                field_u64(v)
                    .and_then(|u| u32::try_from(u).ok())
                    .ok_or_else(|| SchemaError::new(f(JOB_UID), "expected non-negative 32-bit integer"))
            })?;
        let job_id = attrs
            .get(JOB_ID)
            .ok_or_else(|| SchemaError::new(f(JOB_ID), "missing"))
            .and_then(|v| field_u64(v).ok_or_else(|| SchemaError::new(f(JOB_ID), "expected non-negative integer")))?;
        let array_task_id = match attrs.get(JOB_ARRAY_TASK_ID) {
            None | Some(Value::Null) => None,
            Some(v) => Some(field_u64(v).ok_or_else(|| {
                SchemaError::new(f(JOB_ARRAY_TASK_ID), "expected non-negative integer or null")
            })?),
        };
        Some(JobIdentity {
            uid,
            job_id,
            array_task_id,
            hostname,
        })
    } else {
        None
    };

    let mut tags = TagSet::new();
    for (k, v) in &attrs {
        if matches!(k.as_str(), JOB_UID | JOB_ID | JOB_ARRAY_TASK_ID) {
            continue;
        }
        if k == HOST_NAME && job.is_some() {
            continue;
        }
        let value = v.as_str().ok_or_else(|| {
            SchemaError::new(format!("resource.attributes.{k}"), "expected string")
        })?;
        tags.insert(k, value)
            .map_err(|e| SchemaError::new(format!("resource.attributes.{k}"), e.to_string()))?;
    }
    Ok(DecodedResource { job, tags })
}

fn root_object(doc: &Value) -> Result<&Map<String, Value>, SchemaError> {
    doc.as_object()
        .ok_or_else(|| SchemaError::new("$", "expected JSON object"))
}

fn time_field(v: Option<&Value>, field: &str) -> Result<u64, (String, String)> {
    match v {
        None | Some(Value::Null) => Err((field.to_owned(), "missing".into())),
        Some(v) => match field_u64(v) {
            Some(0) => Err((field.to_owned(), "must be > 0".into())),
            Some(t) => Ok(t),
            None => Err((field.to_owned(), "expected decimal unix nanoseconds".into())),
        },
    }
}

/// Decodes a metrics document. The outer error covers the document shape; the
/// inner results cover each point in document order.
pub fn decode_metrics(doc: &Value) -> Result<Vec<Result<MetricSample, RecordError>>, SchemaError> {
    let root = root_object(doc)?;
    let resource = decode_resource(root, true)?;
    let job = resource.job.expect("required");
    let metrics = root
        .get("metrics")
        .ok_or_else(|| SchemaError::new("metrics", "missing"))?
        .as_array()
        .ok_or_else(|| SchemaError::new("metrics", "expected array"))?;

    let mut out = Vec::new();
    for (mi, metric) in metrics.iter().enumerate() {
        let base = format!("metrics[{mi}]");
        let header = (|| {
            let m = metric
                .as_object()
                .ok_or_else(|| (base.clone(), "expected object".to_owned()))?;
            let get_str = |k: &str| -> Result<String, (String, String)> {
                match m.get(k) {
                    Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
                    _ => Err((format!("{base}.{k}"), "expected non-empty string".into())),
                }
            };
            let name = get_str("name")?;
            let unit = match m.get("unit") {
                Some(Value::String(s)) => s.clone(),
                _ => return Err((format!("{base}.unit"), "expected string".into())),
            };
            let kind = get_str("kind").and_then(|k| {
                MetricKind::parse(&k)
                    .ok_or_else(|| (format!("{base}.kind"), format!("unknown kind {k:?}")))
            })?;
            let points = m
                .get("points")
                .and_then(Value::as_array)
                .ok_or_else(|| (format!("{base}.points"), "expected array".to_owned()))?;
            Ok((name, unit, kind, points))
        })();

        let (name, unit, kind, points) = match header {
            Ok(h) => h,
            Err((field, reason)) => {
                let n = metric
                    .get("points")
                    .and_then(Value::as_array)
                    .map(|p| p.len().max(1))
                    .unwrap_or(1);
                for _ in 0..n {
                    let index = out.len();
                    out.push(Err(RecordError {
                        index,
                        field: field.clone(),
                        reason: reason.clone(),
                    }));
                }
                continue;
            }
        };

        for (pi, point) in points.iter().enumerate() {
            let index = out.len();
            let pbase = format!("{base}.points[{pi}]");
            let decoded = (|| {
                let p = point
                    .as_object()
                    .ok_or_else(|| (pbase.clone(), "expected object".to_owned()))?;
                let time_unix_nano = time_field(p.get("timeUnixNano"), &format!("{pbase}.timeUnixNano"))?;
                let value = match p.get("value") {
                    Some(Value::Number(n)) => MetricValue::from_json_number(n)
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| (format!("{pbase}.value"), "not a finite number".to_owned()))?,
                    _ => return Err((format!("{pbase}.value"), "expected number".into())),
                };
                let trace_id = match p.get("traceId") {
                    None | Some(Value::Null) => None,
                    Some(Value::String(s)) => Some(
                        TraceId::from_hex(s).map_err(|e| (format!("{pbase}.traceId"), e.to_string()))?,
                    ),
                    Some(_) => return Err((format!("{pbase}.traceId"), "expected hex string or null".into())),
                };
                Ok(MetricSample {
                    name: name.clone(),
                    unit: unit.clone(),
                    time_unix_nano,
                    value,
                    kind,
                    job: job.clone(),
                    tags: resource.tags.clone(),
                    trace_id,
                })
            })();
            out.push(decoded.map_err(|(field, reason)| RecordError { index, field, reason }));
        }
    }
    Ok(out)
}

/// Decodes a traces document; see [`decode_metrics`].
pub fn decode_spans(doc: &Value) -> Result<Vec<Result<Span, RecordError>>, SchemaError> {
    let root = root_object(doc)?;
    let resource = decode_resource(root, false)?;
    let spans = root
        .get("spans")
        .ok_or_else(|| SchemaError::new("spans", "missing"))?
        .as_array()
        .ok_or_else(|| SchemaError::new("spans", "expected array"))?;

    let mut out = Vec::with_capacity(spans.len());
    for (index, span) in spans.iter().enumerate() {
        let base = format!("spans[{index}]");
        let decoded = (|| {
            let s = span
                .as_object()
                .ok_or_else(|| (base.clone(), "expected object".to_owned()))?;
            let field = |k: &str| format!("{base}.{k}");
            let get_str = |k: &str| -> Result<&str, (String, String)> {
                s.get(k)
                    .and_then(Value::as_str)
                    .ok_or_else(|| (field(k), "expected string".into()))
            };
            let name = get_str("name")?.to_owned();
            let trace_id = TraceId::from_hex(get_str("traceId")?).map_err(|e| (field("traceId"), e.to_string()))?;
            let span_id = SpanId::from_hex(get_str("spanId")?).map_err(|e| (field("spanId"), e.to_string()))?;
            let parent_span_id = match s.get("parentSpanId") {
                None | Some(Value::Null) => None,
                Some(Value::String(p)) => {
                    Some(SpanId::from_hex(p).map_err(|e| (field("parentSpanId"), e.to_string()))?)
                }
                Some(_) => return Err((field("parentSpanId"), "expected hex string or null".into())),
            };
            let kind_s = get_str("kind")?;
            let kind = SpanKind::parse(kind_s).ok_or_else(|| (field("kind"), format!("unknown kind {kind_s:?}")))?;
            let start = time_field(s.get("startTimeUnixNano"), &field("startTimeUnixNano"))?;
            let end = match s.get("endTimeUnixNano") {
                None | Some(Value::Null) => None,
                v => Some(time_field(v, &field("endTimeUnixNano"))?),
            };
            let status = match s.get("status") {
                None | Some(Value::Null) => SpanStatus::Unset,
                Some(Value::String(st)) => {
                    SpanStatus::parse(st).ok_or_else(|| (field("status"), format!("unknown status {st:?}")))?
                }
                Some(_) => return Err((field("status"), "expected string".into())),
            };
            let mut attributes = resource.tags.clone();
            match s.get("attributes") {
                None | Some(Value::Null) => {}
                Some(Value::Object(attrs)) => {
                    for (k, v) in attrs {
                        let v = v
                            .as_str()
                            .ok_or_else(|| (format!("{base}.attributes.{k}"), "expected string".to_owned()))?;
                        attributes
                            .insert(k, v)
                            .map_err(|e| (format!("{base}.attributes.{k}"), e.to_string()))?;
                    }
                }
                Some(_) => return Err((field("attributes"), "expected object".into())),
            }
            let context = TraceContext::new(trace_id, span_id, TraceFlags::SAMPLED)
                .map_err(|e| (field("spanId"), e.to_string()))?;
            let span = Span {
                name,
                context,
                parent_span_id,
                start_unix_nano: start,
                end_unix_nano: end,
                kind,
                attributes,
                status,
                job: resource.job.clone(),
            };
            span.validate().map_err(|e| (base.clone(), e.to_string()))?;
            Ok(span)
        })();
        out.push(decoded.map_err(|(field, reason)| RecordError { index, field, reason }));
    }
    Ok(out)
}
