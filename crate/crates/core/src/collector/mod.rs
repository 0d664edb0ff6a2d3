//! Receiver, processor and exporter stages in one service.
//!
//! Payloads arrive over HTTP, are schema checked record by record, stamped with
//! their receive time, passed through drop-rule filters and deduplicated, then
//! handed to a single batching writer that appends them to the store.

mod client;
mod config;
mod pipeline;
mod server;

pub use client::{query_string, QueryClient, QueryClientError};
pub use config::{
    BatchConfig, CompiledRule, ConfigError, DropRule, Filter, PipelineConfig, ProcessorConfig,
    DEFAULT_LISTEN_ADDRESS,
};
pub use pipeline::{
    apply_filter, Collector, CollectorStats, FilterDecision, FlushTrigger, IngestError,
    IngestResult, ShutdownReport, StartError,
};
pub use server::{
    parse_query_params, router, CollectorServer, HEALTH_PATH, QUERY_PATH, TRACE_LIST_PATH,
};

#[cfg(test)]
mod tests;
