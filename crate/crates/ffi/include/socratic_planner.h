#ifndef SOCRATIC_PLANNER_H
#define SOCRATIC_PLANNER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_ARGUMENT = 1,
  SP_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed input: task file, script, plan text, annotation, trace.
   */
  SP_STATUS_PARSE = 3,
  SP_STATUS_IO = 4,
  /**
   * Invalid configuration or unknown scenario id.
   */
  SP_STATUS_CONFIG = 5,
  /**
   * The gateway could not be constructed or called outside an episode.
   * Model failures during an episode end it with outcome `Aborted` and are
   * reported in the trace instead.
   */
  SP_STATUS_GATEWAY = 6,
  /**
   * Reserved for planning errors that escape the trace.
   */
  SP_STATUS_PLANNING = 7,
  SP_STATUS_PANIC = 99,
} SpStatus;

/**
 * Model gateway (scripted or HTTP).
 */
typedef struct SpGateway SpGateway;

/**
 * Loaded task set.
 */
typedef struct SpTaskSet SpTaskSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next `sp_*` call on the same thread.
 */
const char *sp_last_error(void);

/**
 * Releases a string returned through an `out` parameter. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void sp_string_free(char *s);

/**
 * Loads a task file (object with `scenarios`, or a bare array).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_taskset_load(const char *path, struct SpTaskSet **out);

/**
 * Parses a task set from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_taskset_parse(const char *json, struct SpTaskSet **out);

/**
 * Number of scenarios; 0 for null.
 *
 * # Safety
 * `tasks` must be null or a live handle.
 */
size_t sp_taskset_len(const struct SpTaskSet *tasks);

/**
 * Scenario id at `index` as a new string.
 *
 * # Safety
 * `tasks` must be a live handle; `out` must be writable.
 */
enum SpStatus sp_taskset_scenario_id(const struct SpTaskSet *tasks, size_t index, char **out);

/**
 * # Safety
 * `tasks` must be null or a handle that has not been freed.
 */
void sp_taskset_free(struct SpTaskSet *tasks);

/**
 * Scripted gateway from a script file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_gateway_scripted_load(const char *path, struct SpGateway **out);

/**
 * Scripted gateway from script JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_gateway_scripted_parse(const char *json, struct SpGateway **out);

/**
 * HTTP gateway with default timeout, retries and concurrency. The API key
 * is read from the environment variable named by `api_key_env` on each
 * request; null means `OPENAI_API_KEY`.
 *
 * # Safety
 * String arguments must be NUL-terminated (`api_key_env` may be null);
 * `out` must be writable.
 */
enum SpStatus sp_gateway_http(const char *endpoint,
                              const char *model,
                              const char *api_key_env,
                              struct SpGateway **out);

/**
 * # Safety
 * `gateway` must be null or a handle that has not been freed.
 */
void sp_gateway_free(struct SpGateway *gateway);

/**
 * Runs one episode and returns its trace as a JSON object.
 *
 * `config_json` is an episode configuration object; omitted fields take
 * their defaults, and null means all defaults. A `seed` field of 0 is kept
 * as is; use [`sp_derive_seed`] to reproduce the CLI's per-task seeds.
 *
 * # Safety
 * Handles must be live; strings NUL-terminated (`config_json` may be
 * null); `out_trace` must be writable.
 */
enum SpStatus sp_run_episode(const struct SpTaskSet *tasks,
                             const struct SpGateway *gateway,
                             const char *scenario_id,
                             const char *config_json,
                             char **out_trace);

/**
 * Per-scenario seed used by batch runs.
 *
 * # Safety
 * `scenario_id` must be a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_derive_seed(uint64_t global, const char *scenario_id, uint64_t *out);

/**
 * Extracts subgoals from free text. Output: `{"steps": [...], "skipped_lines": n}`.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out_json` must be writable.
 */
enum SpStatus sp_parse_plan(const char *text, char **out_json);

/**
 * Exact match of a plan (template lines) against an annotation's core sequence.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be writable.
 */
enum SpStatus sp_strict_match(const char *plan_text, const char *annotation_json, bool *out);

/**
 * Match allowing the annotation's floating steps, wildcard receptacles and
 * swappable blocks.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be writable.
 */
enum SpStatus sp_relaxed_match(const char *plan_text, const char *annotation_json, bool *out);

/**
 * Scores JSON-lines traces against the task set's annotations and returns
 * the metrics report as JSON.
 *
 * # Safety
 * `tasks` must be a live handle; `traces_jsonl` NUL-terminated;
 * `out_report` writable.
 */
enum SpStatus sp_score(const struct SpTaskSet *tasks, const char *traces_jsonl, char **out_report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOCRATIC_PLANNER_H */
