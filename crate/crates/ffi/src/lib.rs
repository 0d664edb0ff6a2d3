//! C ABI over the scitrace toolkit.
//!
//! Every entry point returns a [`ScitraceStatus`]; on failure a message is
//! available from [`scitrace_last_error`] on the same thread. Strings handed
//! out by the library are freed with [`scitrace_string_free`]; store handles
//! with [`scitrace_store_close`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scitrace::cgroup::{self, CgroupError};
use scitrace::clock::SystemClock;
use scitrace::model::{normalize_tag_key, SpanId, TraceContext, TraceFlags, TraceId};
use scitrace::store::{QueryRequest, Signal, Store};
use scitrace::trace::{child_context, format_traceparent, new_trace, parse_traceparent, TRACEPARENT_LEN};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScitraceStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidArgument = 4,
    NotFound = 5,
    IoError = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// W3C trace context in binary form.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScitraceTraceContext {
    pub trace_id: [u8; 16],
    pub span_id: [u8; 8],
    pub flags: u8,
}

/// One read of a job's cgroup counters.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScitraceCgroupSnapshot {
    pub taken_unix_nano: u64,
    pub rss_bytes: u64,
    pub cache_bytes: u64,
    pub memory_current_bytes: u64,
    pub cpu_usage_ns_cumulative: u64,
    pub pid_count: u64,
    pub open_files: u64,
}

/// Opaque handle to an on-disk telemetry store.
pub struct ScitraceStore {
    inner: Store,
}

/// Buffer size that fits any formatted traceparent plus its terminator.
pub const SCITRACE_TRACEPARENT_BUFFER_LEN: usize = 56;

const _: () = assert!(SCITRACE_TRACEPARENT_BUFFER_LEN == TRACEPARENT_LEN + 1);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type FfiResult<T> = Result<T, (ScitraceStatus, String)>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> ScitraceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScitraceStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ScitraceStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err((ScitraceStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (ScitraceStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| (ScitraceStatus::NullArgument, format!("{name} is null")))
}

/// Copies `s` plus a terminator into `buf`.
unsafe fn write_str(s: &str, buf: *mut c_char, len: usize) -> FfiResult<()> {
    if buf.is_null() {
        return Err((ScitraceStatus::NullArgument, "buffer is null".into()));
    }
    if s.len() + 1 > len {
        return Err((
            ScitraceStatus::BufferTooSmall,
            format!("need {} bytes, buffer has {len}", s.len() + 1),
        ));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

fn to_c(ctx: &TraceContext) -> ScitraceTraceContext {
    ScitraceTraceContext {
        trace_id: ctx.trace_id().to_bytes(),
        span_id: ctx.span_id().to_bytes(),
        flags: ctx.flags().0,
    }
}

fn from_c(ctx: &ScitraceTraceContext) -> FfiResult<TraceContext> {
    TraceContext::new(
        TraceId::from_bytes(ctx.trace_id),
        SpanId::from_bytes(ctx.span_id),
        TraceFlags(ctx.flags),
    )
    .map_err(|e| (ScitraceStatus::InvalidArgument, e.to_string()))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn scitrace_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Parses a `traceparent` header value.
///
/// # Safety
/// `value` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scitrace_traceparent_parse(
    value: *const c_char,
    out: *mut ScitraceTraceContext,
) -> ScitraceStatus {
    guard(|| {
        let s = str_arg(value, "value")?;
        let out = out_arg(out, "out")?;
        let ctx = parse_traceparent(s).map_err(|e| (ScitraceStatus::ParseError, e.to_string()))?;
        *out = to_c(&ctx);
        Ok(())
    })
}

/// Formats a context into `buf`, which needs
/// `SCITRACE_TRACEPARENT_BUFFER_LEN` bytes.
///
/// # Safety
/// `ctx` must be readable and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn scitrace_traceparent_format(
    ctx: *const ScitraceTraceContext,
    buf: *mut c_char,
    len: usize,
) -> ScitraceStatus {
    guard(|| {
        let ctx = ctx
            .as_ref()
            .ok_or((ScitraceStatus::NullArgument, "ctx is null".into()))?;
        write_str(&format_traceparent(&from_c(ctx)?), buf, len)
    })
}

/// Starts a new trace with ids drawn from an RNG seeded with `seed`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scitrace_new_trace(seed: u64, out: *mut ScitraceTraceContext) -> ScitraceStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = to_c(&new_trace(&mut ChaCha8Rng::seed_from_u64(seed)));
        Ok(())
    })
}

/// Derives a child context of `parent` with a fresh span id.
///
/// # Safety
/// `parent` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn scitrace_child_context(
    parent: *const ScitraceTraceContext,
    seed: u64,
    out: *mut ScitraceTraceContext,
) -> ScitraceStatus {
    guard(|| {
        let parent = parent
            .as_ref()
            .ok_or((ScitraceStatus::NullArgument, "parent is null".into()))?;
        let parent = from_c(parent)?;
        let out = out_arg(out, "out")?;
        *out = to_c(&child_context(&parent, &mut ChaCha8Rng::seed_from_u64(seed)));
        Ok(())
    })
}

/// Normalizes a tag key (`--Case-Number` becomes `case_number`).
///
/// # Safety
/// `raw` must be a valid NUL-terminated string; `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn scitrace_normalize_tag_key(
    raw: *const c_char,
    buf: *mut c_char,
    len: usize,
) -> ScitraceStatus {
    guard(|| {
        let raw = str_arg(raw, "raw")?;
        let key = normalize_tag_key(raw).map_err(|e| (ScitraceStatus::InvalidArgument, e.to_string()))?;
        write_str(&key, buf, len)
    })
}

/// Reads one snapshot of a job's cgroup counters.
///
/// # Safety
/// `cgroup_root` and `proc_root` must be valid NUL-terminated strings; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn scitrace_cgroup_snapshot(
    cgroup_root: *const c_char,
    proc_root: *const c_char,
    uid: u32,
    job_id: u64,
    out: *mut ScitraceCgroupSnapshot,
) -> ScitraceStatus {
    guard(|| {
        let root = str_arg(cgroup_root, "cgroup_root")?;
        let proc_root = str_arg(proc_root, "proc_root")?;
        let out = out_arg(out, "out")?;
        let classify = |e: CgroupError| {
            let status = match e.root_cause() {
                CgroupError::NotFound { .. } => ScitraceStatus::NotFound,
                c if c.is_parse() => ScitraceStatus::ParseError,
                _ => ScitraceStatus::IoError,
            };
            (status, e.to_string())
        };
        let layout = cgroup::resolve_layout(Path::new(root), uid, job_id).map_err(classify)?;
        let s = cgroup::snapshot(&layout, Path::new(proc_root), &SystemClock).map_err(classify)?;
        *out = ScitraceCgroupSnapshot {
            taken_unix_nano: s.taken_unix_nano,
            rss_bytes: s.rss_bytes,
            cache_bytes: s.cache_bytes,
            memory_current_bytes: s.memory_current_bytes,
            cpu_usage_ns_cumulative: s.cpu_usage_ns_cumulative,
            pid_count: s.pid_count,
            open_files: s.open_files,
        };
        Ok(())
    })
}

/// Opens (or creates) a store directory.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string; `out` must be writable. On
/// success `*out` owns a handle released with `scitrace_store_close`.
#[no_mangle]
pub unsafe extern "C" fn scitrace_store_open(dir: *const c_char, out: *mut *mut ScitraceStore) -> ScitraceStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let out = out_arg(out, "out")?;
        let inner = Store::open(dir).map_err(|e| (ScitraceStatus::IoError, e.to_string()))?;
        *out = Box::into_raw(Box::new(ScitraceStore { inner }));
        Ok(())
    })
}

/// Runs a time-range query and returns the result as CSV.
///
/// # Safety
/// `store` must come from `scitrace_store_open`; `signal` must be a valid
/// NUL-terminated string (`metrics` or `spans`); `out_csv` must be writable.
/// On success `*out_csv` is freed with `scitrace_string_free`.
#[no_mangle]
pub unsafe extern "C" fn scitrace_store_query_csv(
    store: *const ScitraceStore,
    signal: *const c_char,
    start_unix_nano: u64,
    end_unix_nano: u64,
    out_csv: *mut *mut c_char,
) -> ScitraceStatus {
    guard(|| {
        let store = store
            .as_ref()
            .ok_or((ScitraceStatus::NullArgument, "store is null".into()))?;
        let signal = str_arg(signal, "signal")?;
        let out = out_arg(out_csv, "out_csv")?;
        let signal = Signal::parse(signal)
            .ok_or_else(|| (ScitraceStatus::InvalidArgument, format!("unknown signal {signal:?}")))?;
        let table = store
            .inner
            .query(&QueryRequest::new(signal, start_unix_nano, end_unix_nano))
            .map_err(|e| (ScitraceStatus::InvalidArgument, e.to_string()))?;
        let csv = CString::new(table.to_csv_string())
            .map_err(|e| (ScitraceStatus::InvalidArgument, e.to_string()))?;
        *out = csv.into_raw();
        Ok(())
    })
}

/// Number of stored records of a signal.
///
/// # Safety
/// `store` must come from `scitrace_store_open`; `signal` must be a valid
/// NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scitrace_store_record_count(
    store: *const ScitraceStore,
    signal: *const c_char,
    out: *mut u64,
) -> ScitraceStatus {
    guard(|| {
        let store = store
            .as_ref()
            .ok_or((ScitraceStatus::NullArgument, "store is null".into()))?;
        let signal = str_arg(signal, "signal")?;
        let out = out_arg(out, "out")?;
        let signal = Signal::parse(signal)
            .ok_or_else(|| (ScitraceStatus::InvalidArgument, format!("unknown signal {signal:?}")))?;
        *out = store.inner.record_count(signal);
        Ok(())
    })
}

/// Releases a store handle. Null is ignored.
///
/// # Safety
/// `store` must come from `scitrace_store_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scitrace_store_close(store: *mut ScitraceStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scitrace_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
