use std::time::Duration;

use super::server::QUERY_PATH;
use crate::store::{QueryRequest, ResultTable, TableError};

#[derive(Debug, thiserror::Error)]
pub enum QueryClientError {
    #[error("query request failed: {0}")]
    Transport(String),
    #[error("collector answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Inverse of [`parse_query_params`](super::parse_query_params).
pub fn query_string(req: &QueryRequest) -> String {
    let mut q = url::form_urlencoded::Serializer::new(String::new());
    q.append_pair("signal", req.signal.as_str());
    q.append_pair("start", &req.start_time.to_string());
    q.append_pair("end", &req.end_time.to_string());
    for n in req.metric_names.iter().flatten() {
        q.append_pair("name", n);
    }
    if let Some(t) = req.trace_id {
        q.append_pair("trace_id", &t.to_hex());
    }
    for (k, v) in &req.attribute_filters {
        q.append_pair(&format!("attr.{k}"), v);
    }
    q.finish()
}

/// Fetches query results as CSV from a collector's query endpoint.
#[derive(Debug, Clone)]
pub struct QueryClient {
    base: String,
    agent: ureq::Agent,
}

impl QueryClient {
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

    pub fn query(&self, req: &QueryRequest) -> Result<ResultTable, QueryClientError> {
        let url = format!("{}{QUERY_PATH}?{}", self.base, query_string(req));
        let mut resp = self
            .agent
            .get(&url)
            .header("accept", "text/csv")
            .call()
            .map_err(|e| QueryClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| QueryClientError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(QueryClientError::Status { status, body });
        }
        Ok(ResultTable::from_csv(req.signal, body.as_bytes())?)
    }
}
