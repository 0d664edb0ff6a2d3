use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::wire::{self, resource_attributes};
use crate::model::{MetricSample, Span, TagSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Metrics,
    Spans,
}

impl Signal {
    pub fn as_str(self) -> &'static str {
        match self {
            Signal::Metrics => "metrics",
            Signal::Spans => "spans",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "metrics" => Some(Signal::Metrics),
            "spans" | "traces" => Some(Signal::Spans),
            _ => None,
        }
    }
}

/// Dedup identity of a metric point: digest of resource, name, time and value.
pub fn metric_identity(sample: &MetricSample) -> String {
    let resource = serde_json::Value::Object(resource_attributes(Some(&sample.job), &sample.tags));
    let mut hasher = Sha256::new();
    hasher.update(resource.to_string().as_bytes());
    hasher.update([0x1f]);
    hasher.update(sample.name.as_bytes());
    hasher.update([0x1f]);
    hasher.update(sample.time_unix_nano.to_string().as_bytes());
    hasher.update([0x1f]);
    hasher.update(sample.value.to_json().to_string().as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

/// Dedup identity of a span: trace and span id. An open span and its closed
/// version are distinct records.
pub fn span_identity(span: &Span) -> String {
    let base = format!("{}-{}", span.context.trace_id(), span.context.span_id());
    if span.is_closed() {
        base
    } else {
        format!("{base}:open")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMetric {
    pub id: String,
    pub received_unix_nano: u64,
    pub sample: MetricSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSpan {
    pub id: String,
    pub received_unix_nano: u64,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StoredRecord {
    Metric(StoredMetric),
    Span(StoredSpan),
}

impl StoredRecord {
    pub fn metric(sample: MetricSample, received_unix_nano: u64) -> Self {
        StoredRecord::Metric(StoredMetric {
            id: metric_identity(&sample),
            received_unix_nano,
            sample,
        })
    }

    pub fn span(span: Span, received_unix_nano: u64) -> Self {
        StoredRecord::Span(StoredSpan {
            id: span_identity(&span),
            received_unix_nano,
            span,
        })
    }

    pub fn signal(&self) -> Signal {
        match self {
            StoredRecord::Metric(_) => Signal::Metrics,
            StoredRecord::Span(_) => Signal::Spans,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            StoredRecord::Metric(m) => &m.id,
            StoredRecord::Span(s) => &s.id,
        }
    }

    /// Record time used for ranges and ordering: sample time, or span start.
    pub fn time_unix_nano(&self) -> u64 {
        match self {
            StoredRecord::Metric(m) => m.sample.time_unix_nano,
            StoredRecord::Span(s) => s.span.start_unix_nano,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            StoredRecord::Metric(m) => &m.sample.name,
            StoredRecord::Span(s) => &s.span.name,
        }
    }

    /// Flat attribute view used by filters: job identity fields plus tags or
    /// span attributes, all as strings.
    pub fn attributes(&self) -> BTreeMap<String, String> {
        let (job, tags): (_, &TagSet) = match self {
            StoredRecord::Metric(m) => (Some(&m.sample.job), &m.sample.tags),
            StoredRecord::Span(s) => (s.span.job.as_ref(), &s.span.attributes),
        };
        let mut out = BTreeMap::new();
        if let Some(job) = job {
            out.insert(wire::HOST_NAME.to_owned(), job.hostname.clone());
            out.insert(wire::JOB_UID.to_owned(), job.uid.to_string());
            out.insert(wire::JOB_ID.to_owned(), job.job_id.to_string());
            if let Some(t) = job.array_task_id {
                out.insert(wire::JOB_ARRAY_TASK_ID.to_owned(), t.to_string());
            }
        }
        for (k, v) in tags.iter() {
            out.insert(k.to_owned(), v.to_owned());
        }
        out
    }

    /// Tag or span attribute keys only (no job identity fields).
    pub fn custom_attribute_keys(&self) -> impl Iterator<Item = &str> {
        match self {
            StoredRecord::Metric(m) => m.sample.tags.keys(),
            StoredRecord::Span(s) => s.span.attributes.keys(),
        }
    }

    pub fn custom_attribute(&self, key: &str) -> Option<&str> {
        match self {
            StoredRecord::Metric(m) => m.sample.tags.get(key),
            StoredRecord::Span(s) => s.span.attributes.get(key),
        }
    }
}
