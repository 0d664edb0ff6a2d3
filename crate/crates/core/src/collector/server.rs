use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{RawQuery, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tracing::{error, info};

use super::config::PipelineConfig;
use super::pipeline::{Collector, IngestError, ShutdownReport, StartError};
use crate::clock::Clock;
use crate::model::wire::{METRICS_PATH, TRACES_PATH};
use crate::model::TraceId;
use crate::store::{QueryRequest, Signal, StoreError};

pub const QUERY_PATH: &str = "/v1/query";
pub const TRACE_LIST_PATH: &str = "/v1/traces/list";
pub const HEALTH_PATH: &str = "/healthz";
const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

/// Parses `/v1/query` parameters: `signal`, `start`, `end`, `name` (repeatable
/// or comma separated), `trace_id` and `attr.<key>=<value>`.
pub fn parse_query_params(raw: &str) -> Result<QueryRequest, String> {
    let mut signal = None;
    let mut start = 0u64;
    let mut end = u64::MAX;
    let mut names: Vec<String> = Vec::new();
    let mut req_trace = None;
    let mut attrs = Vec::new();
    for (k, v) in url::form_urlencoded::parse(raw.as_bytes()) {
        let num = |what: &str| v.parse::<u64>().map_err(|e| format!("{what}: {e}"));
        match k.as_ref() {
            "signal" => {
                signal = Some(Signal::parse(&v).ok_or_else(|| format!("unknown signal {v:?}"))?)
            }
            "start" => start = num("start")?,
            "end" => end = num("end")?,
            "name" => names.extend(v.split(',').filter(|s| !s.is_empty()).map(str::to_owned)),
            "trace_id" => req_trace = Some(TraceId::from_hex(&v).map_err(|e| format!("trace_id: {e}"))?),
            key => match key.strip_prefix("attr.") {
                Some(attr) if !attr.is_empty() => attrs.push((attr.to_owned(), v.into_owned())),
                _ => return Err(format!("unknown query parameter {key:?}")),
            },
        }
    }
    let mut req = QueryRequest::new(signal.ok_or("missing signal parameter")?, start, end);
    if !names.is_empty() {
        req.metric_names = Some(names);
    }
    req.trace_id = req_trace;
    req.attribute_filters.extend(attrs);
    req.validate().map_err(|e| e.to_string())?;
    Ok(req)
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn ingest(collector: Collector, signal: Signal, body: Bytes) -> Response {
    let payload: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}")),
    };
    let outcome = tokio::task::spawn_blocking(move || collector.ingest(signal, &payload)).await;
    match outcome {
        Ok(Ok(result)) => {
            let status = if result.accepted + result.duplicates + result.dropped == 0 && result.rejected > 0 {
                StatusCode::BAD_REQUEST
            } else {
                StatusCode::OK
            };
            (status, Json(result)).into_response()
        }
        Ok(Err(IngestError::Schema(e))) => (
            StatusCode::BAD_REQUEST,
            Json(json!({ "error": e.to_string(), "field": e.field })),
        )
            .into_response(),
        Ok(Err(e @ (IngestError::Unavailable(_) | IngestError::Closed))) => {
            error_response(StatusCode::SERVICE_UNAVAILABLE, e.to_string())
        }
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn post_metrics(State(c): State<Collector>, body: Bytes) -> Response {
    ingest(c, Signal::Metrics, body).await
}

async fn post_traces(State(c): State<Collector>, body: Bytes) -> Response {
    ingest(c, Signal::Spans, body).await
}

fn wants_csv(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("text/csv"))
}

async fn query(State(c): State<Collector>, headers: HeaderMap, RawQuery(raw): RawQuery) -> Response {
    let req = match parse_query_params(raw.as_deref().unwrap_or("")) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e),
    };
    let store = c.store().clone();
    let table = match tokio::task::spawn_blocking(move || store.query(&req)).await {
        Ok(Ok(t)) => t,
        Ok(Err(e @ StoreError::InvalidRange { .. })) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
        Ok(Err(e)) => return error_response(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
        Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    if wants_csv(&headers) {
        ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], table.to_csv_string()).into_response()
    } else {
        Json(table).into_response()
    }
}

async fn trace_list(State(c): State<Collector>, RawQuery(raw): RawQuery) -> Response {
    let mut start = 0u64;
    let mut end = u64::MAX;
    for (k, v) in url::form_urlencoded::parse(raw.as_deref().unwrap_or("").as_bytes()) {
        let parsed = v.parse::<u64>();
        match (k.as_ref(), parsed) {
            ("start", Ok(n)) => start = n,
            ("end", Ok(n)) => end = n,
            (k, _) => return error_response(StatusCode::BAD_REQUEST, format!("bad parameter {k:?}")),
        }
    }
    let store = c.store().clone();
    match tokio::task::spawn_blocking(move || store.list_traces(start, end)).await {
        Ok(Ok(rows)) => Json(rows).into_response(),
        Ok(Err(e @ StoreError::InvalidRange { .. })) => error_response(StatusCode::BAD_REQUEST, e.to_string()),
        Ok(Err(e)) => error_response(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(collector: Collector) -> Router {
    Router::new()
        .route(METRICS_PATH, post(post_metrics))
        .route(TRACES_PATH, post(post_traces))
        .route(QUERY_PATH, get(query))
        .route(TRACE_LIST_PATH, get(trace_list))
        .route(HEALTH_PATH, get(|| async { "ok" }))
        .layer(axum::extract::DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(collector)
}

/// A running collector with its HTTP front end on a background runtime.
pub struct CollectorServer {
    collector: Collector,
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl std::fmt::Debug for CollectorServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CollectorServer").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl CollectorServer {
    pub fn start(cfg: &PipelineConfig, clock: Arc<dyn Clock>) -> Result<Self, StartError> {
        let collector = Collector::start(cfg, clock)?;
        Self::serve(collector, &cfg.listen_address)
    }

    /// Serves an existing pipeline on `address` (port 0 picks a free port).
    pub fn serve(collector: Collector, address: &str) -> Result<Self, StartError> {
        let bind_err = |source| StartError::Bind {
            address: address.to_owned(),
            source,
        };
        let listener = std::net::TcpListener::bind(address).map_err(bind_err)?;
        listener.set_nonblocking(true).map_err(bind_err)?;
        let addr = listener.local_addr().map_err(bind_err)?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("scitrace-http")
            .enable_all()
            .build()
            .map_err(bind_err)?;
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let app = router(collector.clone());
        let thread = std::thread::Builder::new()
            .name("scitrace-server".into())
            .spawn(move || {
                runtime.block_on(async move {
                    let listener = match tokio::net::TcpListener::from_std(listener) {
                        Ok(l) => l,
                        Err(e) => {
                            error!(error = %e, "adopting listener failed");
                            return;
                        }
                    };
                    let served = axum::serve(listener, app)
                        .with_graceful_shutdown(async {
                            let _ = stop_rx.await;
                        })
                        .await;
                    if let Err(e) = served {
                        error!(error = %e, "http server failed");
                    }
                });
            })
            .map_err(bind_err)?;
        info!(%addr, "collector listening");
        Ok(Self {
            collector,
            addr,
            stop: Some(stop_tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL such as `http://127.0.0.1:4318`.
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    /// Stops the HTTP front end, then drains the pipeline.
    pub fn shutdown(mut self) -> ShutdownReport {
        self.stop_http();
        self.collector.shutdown()
    }

    fn stop_http(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for CollectorServer {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_http();
            self.collector.shutdown();
        }
    }
}
