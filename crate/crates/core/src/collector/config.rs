use std::path::{Path, PathBuf};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::store::SegmentPolicy;

pub const DEFAULT_LISTEN_ADDRESS: &str = "127.0.0.1:4318";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{rule}: invalid regex {pattern:?}: {source}")]
    Regex {
        rule: String,
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Drop a record when `key` is present and its value matches `regex`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRule {
    pub key: String,
    pub regex: String,
}

impl DropRule {
    pub fn new(key: impl Into<String>, regex: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            regex: regex.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub max_records: usize,
    #[serde(with = "crate::clock::duration_str")]
    pub max_delay: Duration,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            max_records: 512,
            max_delay: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessorConfig {
    Filter(Vec<DropRule>),
    Batch(BatchConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_listen")]
    pub listen_address: String,
    #[serde(default)]
    pub processors: Vec<ProcessorConfig>,
    pub store_dir: PathBuf,
    #[serde(default)]
    pub drop_rules: Vec<DropRule>,
    /// Accepted records waiting for the writer beyond which ingest answers 503.
    #[serde(default = "default_max_pending")]
    pub max_pending_records: usize,
    /// How long shutdown keeps retrying the final flush.
    #[serde(default = "default_shutdown_deadline", with = "crate::clock::duration_str")]
    pub shutdown_deadline: Duration,
    /// First delay between retries of a failed store write.
    #[serde(default = "default_retry_base", with = "crate::clock::duration_str")]
    pub store_retry_base: Duration,
    #[serde(default)]
    pub segment_policy: Option<SegmentPolicy>,
}

fn default_listen() -> String {
    DEFAULT_LISTEN_ADDRESS.to_owned()
}

fn default_max_pending() -> usize {
    1_000_000
}

fn default_shutdown_deadline() -> Duration {
    Duration::from_secs(10)
}

fn default_retry_base() -> Duration {
    Duration::from_millis(50)
}

impl PipelineConfig {
    pub fn new(store_dir: impl Into<PathBuf>) -> Self {
        Self {
            listen_address: default_listen(),
            processors: Vec::new(),
            store_dir: store_dir.into(),
            drop_rules: Vec::new(),
            max_pending_records: default_max_pending(),
            shutdown_deadline: default_shutdown_deadline(),
            store_retry_base: default_retry_base(),
            segment_policy: None,
        }
    }

    /// Reads a TOML or JSON document, chosen by file extension (TOML unless `.json`).
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let parsed: Result<Self, String> = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let cfg = parsed.map_err(|reason| ConfigError::Parse {
            path: path.to_owned(),
            reason,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let batches: Vec<&BatchConfig> = self
            .processors
            .iter()
            .filter_map(|p| match p {
                ProcessorConfig::Batch(b) => Some(b),
                ProcessorConfig::Filter(_) => None,
            })
            .collect();
        if batches.len() > 1 {
            return Err(ConfigError::Invalid(format!(
                "at most one batch processor allowed, found {}",
                batches.len()
            )));
        }
        if batches.first().is_some_and(|b| b.max_records == 0) {
            return Err(ConfigError::Invalid("batch.max_records must be at least 1".into()));
        }
        if self.listen_address.is_empty() {
            return Err(ConfigError::Invalid("listen_address is empty".into()));
        }
        self.compile_filters().map(|_| ())
    }

    pub fn batch(&self) -> BatchConfig {
        self.processors
            .iter()
            .find_map(|p| match p {
                ProcessorConfig::Batch(b) => Some(b.clone()),
                ProcessorConfig::Filter(_) => None,
            })
            .unwrap_or_default()
    }

    /// Filter stages in application order: top-level `drop_rules` first, then
    /// each filter processor as listed.
    pub fn compile_filters(&self) -> Result<Vec<Filter>, ConfigError> {
        let mut stages = Vec::new();
        if !self.drop_rules.is_empty() {
            stages.push(Filter::compile("drop_rules", &self.drop_rules)?);
        }
        for (i, p) in self.processors.iter().enumerate() {
            if let ProcessorConfig::Filter(rules) = p {
                stages.push(Filter::compile(&format!("processors[{i}].filter"), rules)?);
            }
        }
        Ok(stages)
    }
}

#[derive(Debug, Clone)]
pub struct CompiledRule {
    pub id: String,
    pub key: String,
    pub regex: Regex,
}

/// A compiled list of drop rules.
#[derive(Debug, Clone, Default)]
pub struct Filter {
    pub rules: Vec<CompiledRule>,
}

impl Filter {
    pub fn compile(prefix: &str, rules: &[DropRule]) -> Result<Self, ConfigError> {
        let rules = rules
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let id = format!("{prefix}[{i}]");
                let regex = Regex::new(&r.regex).map_err(|source| ConfigError::Regex {
                    rule: id.clone(),
                    pattern: r.regex.clone(),
                    source,
                })?;
                Ok(CompiledRule {
                    id,
                    key: r.key.clone(),
                    regex,
                })
            })
            .collect::<Result<_, ConfigError>>()?;
        Ok(Self { rules })
    }
}
