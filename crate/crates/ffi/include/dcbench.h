#ifndef DCBENCH_H
#define DCBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DcbStatus {
  DCB_STATUS_OK = 0,
  DCB_STATUS_NULL_POINTER = 1,
  DCB_STATUS_INVALID_ARGUMENT = 2,
  DCB_STATUS_CONFIG = 3,
  DCB_STATUS_IO = 4,
  DCB_STATUS_DATA = 5,
  DCB_STATUS_NO_FEASIBLE_ACTION = 6,
  DCB_STATUS_INTERNAL = 7,
} DcbStatus;

typedef enum DcbAction {
  DCB_ACTION_EXECUTE = 0,
  DCB_ACTION_CLARIFY = 1,
  DCB_ACTION_BACKTRACK = 2,
  DCB_ACTION_ACCEPT = 3,
  DCB_ACTION_STOP = 4,
  DCB_ACTION_EXPAND = 5,
  DCB_ACTION_CUSTOM = 6,
} DcbAction;

/**
 * BM25 index over a passage file.
 */
typedef struct DcbIndex DcbIndex;

/**
 * Saved episode traces.
 */
typedef struct DcbTraceSet DcbTraceSet;

/**
 * Inputs to the graph search policy.
 */
typedef struct DcbGraphInput {
  double p_suff;
  double p_corr;
  bool just_traversed;
  uint32_t n_untried;
  uint32_t n_hidden;
  /**
   * Completed turns.
   */
  uint32_t turn;
} DcbGraphInput;

typedef struct DcbReplay {
  bool success;
  /**
   * Round at which the controller stopped.
   */
  uint32_t rounds;
} DcbReplay;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dcb_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void dcb_string_free(char *s);

/**
 * Execute when `p_suff >= tau`, otherwise clarify.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum DcbStatus dcb_threshold_rule(double p_suff, double tau, enum DcbAction *out);

/**
 * `alpha * p_dense + (1 - alpha) * p_llm`.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum DcbStatus dcb_blend_composite(double p_dense, double p_llm, double alpha, double *out);

/**
 * Graph search policy with thresholds `tau_suff` and `theta_corr`.
 *
 * # Safety
 * `input` must be null or point to a valid struct; `out` must be null or
 * valid for writes.
 */
enum DcbStatus dcb_graph_policy(const struct DcbGraphInput *input,
                                double tau_suff,
                                double theta_corr,
                                enum DcbAction *out);

/**
 * Calendar act-or-ask rule: clarify after a failed execution, execute only
 * when every field is present.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum DcbStatus dcb_calendar_policy(double p_suff, bool last_execute_failed, enum DcbAction *out);

/**
 * Solves a utility problem given as JSON (`actions`, `utility`, optional
 * `context`) and returns the chosen action id.
 *
 * # Safety
 * `problem_json` must be a NUL-terminated string; `out_id` must be null
 * or valid for writes.
 */
enum DcbStatus dcb_utility_argmax(const char *problem_json, char **out_id);

/**
 * Builds a BM25 index from a passage JSONL file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be null or valid
 * for writes.
 */
enum DcbStatus dcb_index_new_from_jsonl(const char *path, struct DcbIndex **out);

/**
 * # Safety
 * `index` must be null or a handle from [`dcb_index_new_from_jsonl`]
 * that has not been freed.
 */
void dcb_index_free(struct DcbIndex *index);

/**
 * Number of passages in the index.
 *
 * # Safety
 * `index` must be null or a live handle; `out` must be null or valid.
 */
enum DcbStatus dcb_index_len(const struct DcbIndex *index, size_t *out);

/**
 * Top-`k` passages as a JSON array of `{"id", "score"}`.
 *
 * # Safety
 * `index` must be a live handle, `query` a NUL-terminated string and
 * `out_json` null or valid for writes.
 */
enum DcbStatus dcb_index_search(const struct DcbIndex *index,
                                const char *query,
                                size_t k,
                                char **out_json);

/**
 * Loads a trace JSONL file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be null or valid.
 */
enum DcbStatus dcb_traces_open(const char *path, struct DcbTraceSet **out);

/**
 * # Safety
 * `set` must be null or a handle from [`dcb_traces_open`] that has not
 * been freed.
 */
void dcb_traces_free(struct DcbTraceSet *set);

/**
 * # Safety
 * `set` must be a live handle; `out` must be null or valid.
 */
enum DcbStatus dcb_traces_len(const struct DcbTraceSet *set, size_t *out);

/**
 * Replays trace `i` under the composite threshold controller.
 *
 * # Safety
 * `set` must be a live handle; `out` must be null or valid.
 */
enum DcbStatus dcb_traces_replay(const struct DcbTraceSet *set,
                                 size_t i,
                                 double tau,
                                 double alpha,
                                 uint32_t budget,
                                 struct DcbReplay *out);

/**
 * Sweeps the grid and returns the per-bucket rows as a JSON array.
 *
 * # Safety
 * `taus` and `alphas` must point to `n_tau` and `n_alpha` doubles; `set`
 * must be a live handle; `out_json` must be null or valid.
 */
enum DcbStatus dcb_traces_sweep(const struct DcbTraceSet *set,
                                const double *taus,
                                size_t n_tau,
                                const double *alphas,
                                size_t n_alpha,
                                uint32_t budget,
                                char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DCBENCH_H */
