//! Trace context creation and propagation.
//!
//! Context crosses process boundaries through the `TRACEPARENT` environment
//! variable in W3C traceparent form (`00-<trace-id>-<span-id>-<flags>`).

mod span_file;

use rand::RngCore;

use crate::clock::Clock;
use crate::env::Environment;
use crate::model::{
    IdError, JobIdentity, Span, SpanId, SpanKind, SpanStatus, TagSet, TraceContext, TraceFlags,
    TraceId,
};

pub use span_file::{SpanFile, SpanRecord, DEFAULT_STATE_DIR_ENV, SPAN_FILE_NAME};

pub const TRACEPARENT_ENV: &str = "TRACEPARENT";
pub const TRACEPARENT_LEN: usize = 55;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceparentError {
    #[error("expected 4 '-'-separated fields, found {found}")]
    SegmentCount { found: usize },
    #[error("unsupported traceparent version {version:?}")]
    UnknownVersion { version: String },
    #[error("invalid {field} at offset {offset}: {source}")]
    Field {
        field: &'static str,
        offset: usize,
        #[source]
        source: IdError,
    },
}

/// Renders `00-<32 hex>-<16 hex>-<2 hex>`, lowercase.
pub fn format_traceparent(ctx: &TraceContext) -> String {
    format!(
        "00-{}-{}-{:02x}",
        ctx.trace_id(),
        ctx.span_id(),
        ctx.flags().0
    )
}

/// Parses a version-00 traceparent.
pub fn parse_traceparent(s: &str) -> Result<TraceContext, TraceparentError> {
    let segments: Vec<&str> = s.split('-').collect();
    let field_err = |field, offset, source| TraceparentError::Field {
        field,
        offset,
        source,
    };
    let version = segments[0];
    crate::model::ids_decode::<1>("version", version).map_err(|e| field_err("version", 0, e))?;
    if version != "00" {
        return Err(TraceparentError::UnknownVersion {
            version: version.to_owned(),
        });
    }
    if segments.len() != 4 {
        return Err(TraceparentError::SegmentCount {
            found: segments.len(),
        });
    }
    let trace_offset = 3;
    let span_offset = trace_offset + segments[1].len() + 1;
    let flags_offset = span_offset + segments[2].len() + 1;
    let trace_id = TraceId::from_hex(segments[1]).map_err(|e| field_err("trace-id", trace_offset, e))?;
    let span_id = SpanId::from_hex(segments[2]).map_err(|e| field_err("parent-id", span_offset, e))?;
    let [flags] = crate::model::ids_decode::<1>("trace-flags", segments[3])
        .map_err(|e| field_err("trace-flags", flags_offset, e))?;
    Ok(TraceContext::new(trace_id, span_id, TraceFlags(flags)).expect("ids checked nonzero"))
}

fn nonzero_bytes<const N: usize>(rng: &mut dyn RngCore) -> [u8; N] {
    let mut buf = [0u8; N];
    loop {
        rng.fill_bytes(&mut buf);
        if buf.iter().any(|b| *b != 0) {
            return buf;
        }
    }
}

/// Starts a fresh, sampled trace.
pub fn new_trace(rng: &mut dyn RngCore) -> TraceContext {
    let trace_id = TraceId::from_bytes(nonzero_bytes(rng));
    let span_id = SpanId::from_bytes(nonzero_bytes(rng));
    TraceContext::new(trace_id, span_id, TraceFlags::SAMPLED).expect("nonzero ids")
}

/// Same trace and flags, fresh span id distinct from the parent's.
pub fn child_context(parent: &TraceContext, rng: &mut dyn RngCore) -> TraceContext {
    let span_id = loop {
        let id = SpanId::from_bytes(nonzero_bytes(rng));
        if id != parent.span_id() {
            break id;
        }
    };
    TraceContext::new(parent.trace_id(), span_id, parent.flags()).expect("nonzero ids")
}

/// What a job script exports so child processes inherit the context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropagationEnvelope {
    pub env_var_name: &'static str,
    pub value: String,
}

impl PropagationEnvelope {
    pub fn for_context(ctx: &TraceContext) -> Self {
        Self {
            env_var_name: TRACEPARENT_ENV,
            value: format_traceparent(ctx),
        }
    }

    pub fn context(&self) -> TraceContext {
        parse_traceparent(&self.value).expect("envelope built from a valid context")
    }

    /// `TRACEPARENT=<value>`
    pub fn export_line(&self) -> String {
        format!("{}={}", self.env_var_name, self.value)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SpanLifecycleError {
    #[error("span name is empty")]
    EmptyName,
    #[error("inherited TRACEPARENT is malformed ({0}); pass --force-new-trace to start a new trace")]
    MalformedInherited(#[source] TraceparentError),
    #[error("unknown span handle {0:?}")]
    UnknownSpan(String),
    #[error("span {0:?} already ended")]
    DoubleEnd(String),
    #[error("span file {path}: {source}")]
    State {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct SpanStart {
    pub name: String,
    pub kind: SpanKind,
    pub attributes: TagSet,
    pub job: Option<JobIdentity>,
    /// Ignore a malformed inherited TRACEPARENT and start a new trace instead.
    pub force_new_trace: bool,
}

impl SpanStart {
    pub fn new(name: impl Into<String>, kind: SpanKind) -> Self {
        Self {
            name: name.into(),
            kind,
            attributes: TagSet::new(),
            job: None,
            force_new_trace: false,
        }
    }
}

/// Opens a span: a child of `TRACEPARENT` when set, else the root of a new trace.
/// The open span is recorded in `file` under its handle (the span id).
pub fn span_start(
    file: &SpanFile,
    req: SpanStart,
    env: &dyn Environment,
    clock: &dyn Clock,
    rng: &mut dyn RngCore,
) -> Result<(Span, PropagationEnvelope), SpanLifecycleError> {
    if req.name.is_empty() {
        return Err(SpanLifecycleError::EmptyName);
    }
    let inherited = match env.var(TRACEPARENT_ENV) {
        Some(v) => match parse_traceparent(&v) {
            Ok(ctx) => Some(ctx),
            Err(_) if req.force_new_trace => None,
            Err(e) => return Err(SpanLifecycleError::MalformedInherited(e)),
        },
        None => None,
    };
    let (context, parent_span_id) = match inherited {
        Some(parent) => (child_context(&parent, rng), Some(parent.span_id())),
        None => (new_trace(rng), None),
    };
    let span = Span {
        name: req.name,
        context,
        parent_span_id,
        start_unix_nano: clock.now_unix_nano(),
        end_unix_nano: None,
        kind: req.kind,
        attributes: req.attributes,
        status: SpanStatus::Unset,
        job: req.job,
    };
    file.record_open(&span)?;
    Ok((span, PropagationEnvelope::for_context(&context)))
}

/// Closes an open span and queues it for export.
pub fn span_end(
    file: &SpanFile,
    handle: &str,
    status: SpanStatus,
    clock: &dyn Clock,
) -> Result<Span, SpanLifecycleError> {
    file.close(handle, status, clock.now_unix_nano())
}
