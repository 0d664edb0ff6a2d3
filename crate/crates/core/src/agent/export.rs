use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::wire::{encode_metrics, encode_spans, METRICS_PATH, TRACES_PATH};
use crate::model::{MetricSample, Span};

/// What the agent ships to the collector in one export call.
#[derive(Debug, Clone, PartialEq)]
pub enum ExportBatch {
    Metrics(Vec<MetricSample>),
    Spans(Vec<Span>),
}

impl ExportBatch {
    pub fn len(&self) -> usize {
        match self {
            ExportBatch::Metrics(m) => m.len(),
            ExportBatch::Spans(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> &'static str {
        match self {
            ExportBatch::Metrics(_) => METRICS_PATH,
            ExportBatch::Spans(_) => TRACES_PATH,
        }
    }

    /// Wire documents for this batch; one per resource.
    pub fn documents(&self) -> Vec<Vec<u8>> {
        let docs: Result<Vec<Vec<u8>>, _> = match self {
            ExportBatch::Metrics(m) => encode_metrics(m).iter().map(serde_json::to_vec).collect(),
            ExportBatch::Spans(s) => encode_spans(s).iter().map(serde_json::to_vec).collect(),
        };
        docs.expect("wire documents serialize")
    }
}

/// A response status, or a transport-level failure (no response at all).
pub type PostResult = Result<u16, String>;

/// Sends one JSON document to a collector path.
pub trait Transport: Send + Sync {
    fn post(&self, path: &str, body: &[u8]) -> PostResult;
}

/// HTTP transport against a collector base URL.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: endpoint.trim_end_matches('/').to_owned(),
            agent,
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, path: &str, body: &[u8]) -> PostResult {
        let url = format!("{}{path}", self.base);
        self.agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body)
            .map(|resp| resp.status().as_u16())
            .map_err(|e| e.to_string())
    }
}

/// Exponential backoff: the k-th retry waits `base * 2^k`, jittered by ±`jitter`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retry: u32,
    pub backoff_base: Duration,
    pub jitter: f64,
    pub seed: u64,
}

impl RetryPolicy {
    pub fn new(max_retry: u32, backoff_base: Duration) -> Self {
        Self {
            max_retry,
            backoff_base,
            jitter: 0.2,
            seed: 0x5eed,
        }
    }

    /// Delay before retry number `k` (0-based) for a given jitter draw in [-1, 1].
    pub fn delay(&self, k: u32, unit_draw: f64) -> Duration {
        let nominal = self.backoff_base.as_secs_f64() * 2f64.powi(k.min(30) as i32);
        Duration::from_secs_f64((nominal * (1.0 + self.jitter * unit_draw.clamp(-1.0, 1.0))).max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ExportResult {
    Accepted { attempts: u32, delays: Vec<Duration> },
    /// The collector answered 4xx; retrying would not help.
    Rejected { status: u16, attempts: u32 },
    /// Every attempt hit a transport error or a 5xx.
    RetriesExhausted { attempts: u32, last_error: String, delays: Vec<Duration> },
}

impl ExportResult {
    pub fn attempts(&self) -> u32 {
        match self {
            ExportResult::Accepted { attempts, .. }
            | ExportResult::Rejected { attempts, .. }
            | ExportResult::RetriesExhausted { attempts, .. } => *attempts,
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, ExportResult::Accepted { .. })
    }
}

/// Posts every document of the batch with retries. Stops at the first document
/// that cannot be delivered.
pub fn export_batch(
    batch: &ExportBatch,
    transport: &dyn Transport,
    policy: &RetryPolicy,
    sleep: &dyn Fn(Duration),
) -> ExportResult {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut attempts = 0;
    let mut delays = Vec::new();
    for doc in batch.documents() {
        let mut retry = 0;
        loop {
            attempts += 1;
            let error = match transport.post(batch.path(), &doc) {
                Ok(status) if (200..300).contains(&status) => break,
                Ok(status) if (400..500).contains(&status) => {
                    return ExportResult::Rejected { status, attempts };
                }
                Ok(status) => format!("collector answered {status}"),
                Err(e) => e,
            };
            if retry >= policy.max_retry {
                return ExportResult::RetriesExhausted {
                    attempts,
                    last_error: error,
                    delays,
                };
            }
            let d = policy.delay(retry, rng.random_range(-1.0..=1.0));
            tracing::debug!(attempt = attempts, delay = ?d, %error, "export failed, backing off");
            delays.push(d);
            sleep(d);
            retry += 1;
        }
    }
    ExportResult::Accepted { attempts, delays }
}
