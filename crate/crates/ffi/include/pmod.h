/* Generated by cbindgen from crates/ffi. Do not edit. */

#ifndef PMOD_H
#define PMOD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PMOD_STATUS_OK = 0,
  PMOD_STATUS_NULL_POINTER = 1,
  PMOD_STATUS_INVALID_ARGUMENT = 2,
  PMOD_STATUS_BUFFER_TOO_SMALL = 3,
  PMOD_STATUS_PANIC = 4,
} PmodStatus;

/**
 * Opaque cost report.
 */
typedef struct PmodCostReport PmodCostReport;

/**
 * Opaque per-layer retention schedule.
 */
typedef struct PmodSchedule PmodSchedule;

typedef struct {
  double min_ratio;
  double max_ratio;
  double achieved;
  bool within_tolerance;
} PmodThresholds;

/**
 * Decoder shape used by the cost model.
 */
typedef struct {
  size_t n_layers;
  size_t d_model;
  size_t n_heads;
  size_t d_ff;
  size_t vocab_size;
} PmodModelShape;

typedef struct {
  size_t n_vision;
  size_t n_text_prompt;
  size_t n_decode;
  size_t bytes_per_element;
} PmodWorkload;

typedef struct {
  uint64_t total_flops;
  uint64_t baseline_flops;
  uint64_t head_flops;
  uint64_t total_kv_bytes;
  uint64_t baseline_kv_bytes;
  double flops_ratio;
  double kv_ratio;
  double vision_kv_ratio;
} PmodCostSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into this library on the same
 * thread.
 */
const char *pmod_last_error(void);

/**
 * `alpha·tanh(w)`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `double`.
 */
PmodStatus pmod_tanh_norm(double alpha, double w, double *out);

/**
 * Unclamped cosine ratio `½·cos(πl/L) + beta` of 1-based layer `l`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `double`.
 */
PmodStatus pmod_prd_ratio(double beta, size_t n_layers, size_t l, double *out);

/**
 * Top-k selection over `n` routing weights: writes 1 to `mask[i]` for kept
 * tokens and 0 otherwise, and the kept count to `k`.
 *
 * # Safety
 * `weights` must point to `n` readable doubles and `mask` to `n` writable
 * bytes; `k` must be null or writable.
 */
PmodStatus pmod_select_topk(const double *weights,
                            size_t n,
                            double ratio,
                            uint8_t *mask,
                            size_t *k);

/**
 * Cosine schedule. With `clamp` false, raw ratios are kept and
 * `min_ratio` / `max_ratio` are ignored.
 *
 * # Safety
 * `out` must be null or writable.
 */
PmodStatus pmod_schedule_cosine(double beta,
                                double min_ratio,
                                double max_ratio,
                                size_t n_layers,
                                bool clamp,
                                PmodSchedule **out);

/**
 * The same ratio in every layer.
 *
 * # Safety
 * `out` must be null or writable.
 */
PmodStatus pmod_schedule_constant(double ratio, size_t n_layers, PmodSchedule **out);

/**
 * Grid search for cosine thresholds reaching mean retention `target`.
 * When `schedule` is non-null it receives the resulting schedule.
 *
 * # Safety
 * `result` must be null or writable; `schedule` may be null.
 */
PmodStatus pmod_search_thresholds(double target,
                                  double beta,
                                  size_t n_layers,
                                  PmodThresholds *result,
                                  PmodSchedule **schedule);

/**
 * # Safety
 * `schedule` must be a live handle or null; `n` must be writable.
 */
PmodStatus pmod_schedule_len(const PmodSchedule *schedule, size_t *n);

/**
 * Copies the per-layer ratios into `buf`, which must hold
 * `pmod_schedule_len` values.
 *
 * # Safety
 * `buf` must point to `cap` writable doubles.
 */
PmodStatus pmod_schedule_ratios(const PmodSchedule *schedule, double *buf, size_t cap);

/**
 * # Safety
 * `schedule` must be a live handle or null; `out` must be writable.
 */
PmodStatus pmod_schedule_mean(const PmodSchedule *schedule, double *out);

/**
 * # Safety
 * `schedule` must come from this library and not be freed twice.
 */
void pmod_schedule_free(PmodSchedule *schedule);

/**
 * Prefill and decode cost of `shape` under `schedule` for `workload`.
 *
 * # Safety
 * Pointers must be valid or null; `out` must be writable.
 */
PmodStatus pmod_cost(const PmodModelShape *shape,
                     const PmodSchedule *schedule,
                     const PmodWorkload *workload,
                     PmodCostReport **out);

/**
 * # Safety
 * `report` must be a live handle or null; `out` must be writable.
 */
PmodStatus pmod_cost_summary(const PmodCostReport *report, PmodCostSummary *out);

/**
 * Per-layer FLOPs (prefill plus decode) into `buf`.
 *
 * # Safety
 * `buf` must point to `cap` writable values.
 */
PmodStatus pmod_cost_layer_flops(const PmodCostReport *report, uint64_t *buf, size_t cap);

/**
 * # Safety
 * `report` must come from this library and not be freed twice.
 */
void pmod_cost_free(PmodCostReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PMOD_H */
