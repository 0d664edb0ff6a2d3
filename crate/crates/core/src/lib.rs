//! Observability toolkit for job-based scientific workloads on batch clusters.
//!
//! The pieces, in data-flow order:
//!
//! - [`cgroup`] reads per-job counters from cgroup v1/v2 hierarchies.
//! - [`agent`] samples those counters, derives metrics and pushes them to a collector.
//! - [`trace`] creates and propagates trace context through `TRACEPARENT`.
//! - [`collector`] receives payloads over HTTP, filters and batches them.
//! - [`store`] persists records in append-only segments and answers queries.
//! - [`analysis`] aggregates query results into series, histograms and charts.
//! - [`sim`] generates synthetic fleets with ground truth and runs them end to end.

pub mod agent;
pub mod analysis;
pub mod cgroup;
pub mod clock;
pub mod collector;
pub mod env;
pub mod model;
pub mod sim;
pub mod store;
pub mod trace;
