#ifndef EXECBENCH_H
#define EXECBENCH_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum EbStatus {
  EB_STATUS_OK = 0,
  EB_STATUS_NULL_ARGUMENT = 1,
  EB_STATUS_INVALID_UTF8 = 2,
  EB_STATUS_INVALID_ARGUMENT = 3,
  EB_STATUS_BOUNDS = 4,
  EB_STATUS_LIFECYCLE = 5,
  EB_STATUS_INFRASTRUCTURE = 6,
  EB_STATUS_EVALUATION = 7,
  EB_STATUS_PREPROCESS = 8,
  EB_STATUS_IO = 9,
  EB_STATUS_PANIC = 10,
} EbStatus;

/**
 * Opaque environment session.
 */
typedef struct EbEnv EbEnv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *eb_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next library call on the same thread.
 */
const char *eb_last_error(void);

/**
 * Release a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` is null or a pointer returned by this library and not yet freed.
 */
void eb_string_free(char *s);

/**
 * Open environment `env_name` (`bash`, `sql`, `python`, `ctf`) over the
 * tasks in `dataset_path`. `backend` is `docker`, `local` or `auto` (null
 * means auto). `options_json` is null or a JSON object of environment
 * options.
 *
 * # Safety
 * String arguments are null or valid NUL-terminated strings; `out` is valid
 * for a pointer write.
 */
enum EbStatus eb_env_open(const char *env_name,
                          const char *dataset_path,
                          const char *backend,
                          const char *options_json,
                          struct EbEnv **out);

/**
 * Number of tasks in the session's dataset.
 *
 * # Safety
 * `env` is null or a live handle.
 */
size_t eb_env_task_count(const struct EbEnv *env);

/**
 * Start an episode on task `index`; a negative index takes the next task.
 * Writes `{"observation": ..., "task_id": ...}` to `out_json` when non-null.
 *
 * # Safety
 * `env` is a live handle; `out_json` is null or valid for a pointer write.
 */
enum EbStatus eb_env_reset(struct EbEnv *env, int64_t index, char **out_json);

/**
 * Execute one code action. Writes the step outcome JSON
 * (`observation`, `reward`, `done`, `info`) to `out_json` when non-null.
 *
 * # Safety
 * `env` is a live handle; `code` is a valid string; `out_json` is null or
 * valid for a pointer write.
 */
enum EbStatus eb_env_step(struct EbEnv *env, const char *code, char **out_json);

/**
 * Submit, optionally with a payload (null for a bare submit), ending the
 * episode.
 *
 * # Safety
 * As [`eb_env_step`]; `payload` may be null.
 */
enum EbStatus eb_env_submit(struct EbEnv *env, const char *payload, char **out_json);

/**
 * Trajectory JSON of the last finished episode.
 *
 * # Safety
 * `env` is a live handle; `out_json` is valid for a pointer write.
 */
enum EbStatus eb_env_trajectory(struct EbEnv *env, char **out_json);

/**
 * Abort any live episode and release containers. The handle stays valid
 * until [`eb_env_free`]; later calls fail with `EB_STATUS_LIFECYCLE`.
 *
 * # Safety
 * `env` is a live handle.
 */
enum EbStatus eb_env_close(struct EbEnv *env);

/**
 * Close (if needed) and free a handle. Null is ignored.
 *
 * # Safety
 * `env` is null or a live handle not used afterwards.
 */
void eb_env_free(struct EbEnv *env);

/**
 * Gauss error function.
 */
double eb_erf(double x);

/**
 * TF-IDF cosine similarity of two texts.
 *
 * # Safety
 * `a` and `b` are valid strings; `out` is valid for a write.
 */
enum EbStatus eb_lexical_similarity(const char *a, const char *b, double *out);

/**
 * Kendall's tau-b of `n` paired values. Fails with
 * `EB_STATUS_INVALID_ARGUMENT` when undefined (n < 2 or a constant side).
 *
 * # Safety
 * `x` and `y` point to `n` readable doubles; `out` is valid for a write.
 */
enum EbStatus eb_kendall_tau_b(const double *x, const double *y, size_t n, double *out);

/**
 * SQL reward of two result sets given as JSON
 * (`{"rows": [[{"t": "int", "v": 1}]], "error": null}`). Writes the total
 * to `out` and the breakdown JSON to `breakdown_json` when non-null.
 *
 * # Safety
 * String arguments are valid strings; `out` is valid for a write;
 * `breakdown_json` is null or valid for a pointer write.
 */
enum EbStatus eb_sql_reward(const char *agent_json,
                            const char *gold_json,
                            double *out,
                            char **breakdown_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXECBENCH_H */
