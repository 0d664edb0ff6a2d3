use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{JobIdentity, TagSet, TraceId};

/// Registered metric names.
pub mod names {
    pub const MEMORY_RSS: &str = "job.memory.rss";
    pub const MEMORY_CACHE: &str = "job.memory.cache";
    pub const MEMORY_CURRENT: &str = "job.memory.current";
    pub const CPU_TIME: &str = "job.cpu.time";
    pub const CPU_UTILIZATION: &str = "job.cpu.utilization";
    pub const OPEN_FILES: &str = "job.open_files";
    pub const PIDS: &str = "job.pids";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "gauge")]
    Gauge,
    #[serde(rename = "cumulative")]
    CumulativeCounter,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Gauge => "gauge",
            MetricKind::CumulativeCounter => "cumulative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gauge" => Some(MetricKind::Gauge),
            "cumulative" | "cumulative_counter" => Some(MetricKind::CumulativeCounter),
            _ => None,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A sample value. Integers stay integers on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Int(i64),
    Double(f64),
}

impl MetricValue {
    pub fn as_f64(self) -> f64 {
        match self {
            MetricValue::Int(v) => v as f64,
            MetricValue::Double(v) => v,
        }
    }

    pub fn is_finite(self) -> bool {
        match self {
            MetricValue::Int(_) => true,
            MetricValue::Double(v) => v.is_finite(),
        }
    }

    pub fn to_json(self) -> serde_json::Value {
        match self {
            MetricValue::Int(v) => serde_json::Value::from(v),
            MetricValue::Double(v) => serde_json::Number::from_f64(v)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
        }
    }

    /// Integers that fit in i64 become `Int`, everything else `Double`.
    pub fn from_json_number(n: &serde_json::Number) -> Option<Self> {
        if let Some(i) = n.as_i64() {
            Some(MetricValue::Int(i))
        } else {
            n.as_f64().map(MetricValue::Double)
        }
    }
}

impl From<u64> for MetricValue {
    fn from(v: u64) -> Self {
        i64::try_from(v)
            .map(MetricValue::Int)
            .unwrap_or(MetricValue::Double(v as f64))
    }
}

impl From<f64> for MetricValue {
    fn from(v: f64) -> Self {
        MetricValue::Double(v)
    }
}

/// One timestamped measurement of one metric for one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub name: String,
    pub unit: String,
    pub time_unix_nano: u64,
    pub value: MetricValue,
    pub kind: MetricKind,
    pub job: JobIdentity,
    pub tags: TagSet,
    pub trace_id: Option<TraceId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetricDescriptor {
    pub name: String,
    pub unit: String,
    pub kind: MetricKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("metric {name:?} already registered as {existing_unit}/{existing_kind}, not {unit}/{kind}")]
    Conflict {
        name: String,
        existing_unit: String,
        existing_kind: MetricKind,
        unit: String,
        kind: MetricKind,
    },
    #[error("metric {0:?} is not registered")]
    Unknown(String),
    #[error("metric {name:?} has unit {found:?}, registered unit is {expected:?}")]
    UnitMismatch {
        name: String,
        expected: String,
        found: String,
    },
    #[error("metric {name:?} has kind {found}, registered kind is {expected}")]
    KindMismatch {
        name: String,
        expected: MetricKind,
        found: MetricKind,
    },
}

/// Table of known metric names with their unit and kind.
#[derive(Debug, Clone, Default)]
pub struct MetricRegistry {
    metrics: BTreeMap<String, MetricDescriptor>,
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry pre-populated with every metric the agent emits.
    pub fn standard() -> Self {
        let mut reg = Self::new();
        for (name, unit, kind) in STANDARD_METRICS {
            reg.register(name, unit, kind).expect("standard table is consistent");
        }
        reg
    }

    /// Registers a metric. Re-registering with the same unit and kind is a no-op.
    pub fn register(
        &mut self,
        name: &str,
        unit: &str,
        kind: MetricKind,
    ) -> Result<MetricDescriptor, RegistryError> {
        if let Some(existing) = self.metrics.get(name) {
            if existing.unit != unit || existing.kind != kind {
                return Err(RegistryError::Conflict {
                    name: name.to_owned(),
                    existing_unit: existing.unit.clone(),
                    existing_kind: existing.kind,
                    unit: unit.to_owned(),
                    kind,
                });
            }
            return Ok(existing.clone());
        }
        let desc = MetricDescriptor {
            name: name.to_owned(),
            unit: unit.to_owned(),
            kind,
        };
        self.metrics.insert(name.to_owned(), desc.clone());
        Ok(desc)
    }

    pub fn get(&self, name: &str) -> Option<&MetricDescriptor> {
        self.metrics.get(name)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &MetricDescriptor> {
        self.metrics.values()
    }

    pub fn check(&self, name: &str, unit: &str, kind: MetricKind) -> Result<(), RegistryError> {
        let desc = self
            .metrics
            .get(name)
            .ok_or_else(|| RegistryError::Unknown(name.to_owned()))?;
        if desc.unit != unit {
            return Err(RegistryError::UnitMismatch {
                name: name.to_owned(),
                expected: desc.unit.clone(),
                found: unit.to_owned(),
            });
        }
        if desc.kind != kind {
            return Err(RegistryError::KindMismatch {
                name: name.to_owned(),
                expected: desc.kind,
                found: kind,
            });
        }
        Ok(())
    }
}

pub const STANDARD_METRICS: [(&str, &str, MetricKind); 7] = [
    (names::MEMORY_RSS, "By", MetricKind::Gauge),
    (names::MEMORY_CACHE, "By", MetricKind::Gauge),
    (names::MEMORY_CURRENT, "By", MetricKind::Gauge),
    (names::CPU_TIME, "ns", MetricKind::CumulativeCounter),
    (names::CPU_UTILIZATION, "1", MetricKind::Gauge),
    (names::OPEN_FILES, "1", MetricKind::Gauge),
    (names::PIDS, "1", MetricKind::Gauge),
];
