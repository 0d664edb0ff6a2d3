#ifndef SCITRACE_H
#define SCITRACE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Buffer size that fits any formatted traceparent plus its terminator.
 */
#define SCITRACE_TRACEPARENT_BUFFER_LEN 56

/**
 * Result code of every call.
 */
typedef enum ScitraceStatus {
  SCITRACE_STATUS_OK = 0,
  SCITRACE_STATUS_NULL_ARGUMENT = 1,
  SCITRACE_STATUS_INVALID_UTF8 = 2,
  SCITRACE_STATUS_PARSE_ERROR = 3,
  SCITRACE_STATUS_INVALID_ARGUMENT = 4,
  SCITRACE_STATUS_NOT_FOUND = 5,
  SCITRACE_STATUS_IO_ERROR = 6,
  SCITRACE_STATUS_BUFFER_TOO_SMALL = 7,
  SCITRACE_STATUS_PANIC = 8,
} ScitraceStatus;

/**
 * Opaque handle to an on-disk telemetry store.
 */
typedef struct ScitraceStore ScitraceStore;

/**
 * W3C trace context in binary form.
 */
typedef struct ScitraceTraceContext {
  uint8_t trace_id[16];
  uint8_t span_id[8];
  uint8_t flags;
} ScitraceTraceContext;

/**
 * One read of a job's cgroup counters.
 */
typedef struct ScitraceCgroupSnapshot {
  uint64_t taken_unix_nano;
  uint64_t rss_bytes;
  uint64_t cache_bytes;
  uint64_t memory_current_bytes;
  uint64_t cpu_usage_ns_cumulative;
  uint64_t pid_count;
  uint64_t open_files;
} ScitraceCgroupSnapshot;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *scitrace_last_error(void);

/**
 * Parses a `traceparent` header value.
 *
 * # Safety
 * `value` must be a valid NUL-terminated string; `out` must be writable.
 */
enum ScitraceStatus scitrace_traceparent_parse(const char *value, struct ScitraceTraceContext *out);

/**
 * Formats a context into `buf`, which needs
 * `SCITRACE_TRACEPARENT_BUFFER_LEN` bytes.
 *
 * # Safety
 * `ctx` must be readable and `buf` writable for `len` bytes.
 */
enum ScitraceStatus scitrace_traceparent_format(const struct ScitraceTraceContext *ctx,
                                                char *buf,
                                                size_t len);

/**
 * Starts a new trace with ids drawn from an RNG seeded with `seed`.
 *
 * # Safety
 * `out` must be writable.
 */
enum ScitraceStatus scitrace_new_trace(uint64_t seed, struct ScitraceTraceContext *out);

/**
 * Derives a child context of `parent` with a fresh span id.
 *
 * # Safety
 * `parent` must be readable and `out` writable.
 */
enum ScitraceStatus scitrace_child_context(const struct ScitraceTraceContext *parent,
                                           uint64_t seed,
                                           struct ScitraceTraceContext *out);

/**
 * Normalizes a tag key (`--Case-Number` becomes `case_number`).
 *
 * # Safety
 * `raw` must be a valid NUL-terminated string; `buf` writable for `len` bytes.
 */
enum ScitraceStatus scitrace_normalize_tag_key(const char *raw, char *buf, size_t len);

/**
 * Reads one snapshot of a job's cgroup counters.
 *
 * # Safety
 * `cgroup_root` and `proc_root` must be valid NUL-terminated strings; `out`
 * must be writable.
 */
enum ScitraceStatus scitrace_cgroup_snapshot(const char *cgroup_root,
                                             const char *proc_root,
                                             uint32_t uid,
                                             uint64_t job_id,
                                             struct ScitraceCgroupSnapshot *out);

/**
 * Opens (or creates) a store directory.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string; `out` must be writable. On
 * success `*out` owns a handle released with `scitrace_store_close`.
 */
enum ScitraceStatus scitrace_store_open(const char *dir, struct ScitraceStore **out);

/**
 * Runs a time-range query and returns the result as CSV.
 *
 * # Safety
 * `store` must come from `scitrace_store_open`; `signal` must be a valid
 * NUL-terminated string (`metrics` or `spans`); `out_csv` must be writable.
 * On success `*out_csv` is freed with `scitrace_string_free`.
 */
enum ScitraceStatus scitrace_store_query_csv(const struct ScitraceStore *store,
                                             const char *signal,
                                             uint64_t start_unix_nano,
                                             uint64_t end_unix_nano,
                                             char **out_csv);

/**
 * Number of stored records of a signal.
 *
 * # Safety
 * `store` must come from `scitrace_store_open`; `signal` must be a valid
 * NUL-terminated string; `out` must be writable.
 */
enum ScitraceStatus scitrace_store_record_count(const struct ScitraceStore *store,
                                                const char *signal,
                                                uint64_t *out);

/**
 * Releases a store handle. Null is ignored.
 *
 * # Safety
 * `store` must come from `scitrace_store_open` and not be used afterwards.
 */
void scitrace_store_close(struct ScitraceStore *store);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void scitrace_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCITRACE_H */
