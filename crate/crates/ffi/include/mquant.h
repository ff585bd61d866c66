/* C interface to the mquant quantization toolkit. */

#ifndef MQUANT_H
#define MQUANT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum MqStatus {
  MqStatus_Ok = 0,
  /**
   * Numerical or model-level failure; see `mq_last_error`.
   */
  MqStatus_ComputeError = 1,
  /**
   * Invalid argument or configuration.
   */
  MqStatus_InvalidArgument = 2,
  /**
   * File I/O or format failure.
   */
  MqStatus_IoError = 3,
  /**
   * A required pointer was null.
   */
  MqStatus_NullPointer = 4,
} MqStatus;

/**
 * Synthetic calibration distribution.
 */
typedef enum MqDist {
  MqDist_Gauss = 0,
  MqDist_HeavyTail = 1,
} MqDist;

/**
 * Transformation scheme selector.
 */
typedef enum MqScheme {
  MqScheme_Rtn = 0,
  MqScheme_Hadamard = 1,
  MqScheme_Klt = 2,
  MqScheme_Full = 3,
} MqScheme;

/**
 * Opaque calibration-data handle (`[batch, tokens, d_model]`).
 */
typedef struct MqCalib MqCalib;

/**
 * Opaque model handle.
 */
typedef struct MqModel MqModel;

/**
 * Opaque statistics handle.
 */
typedef struct MqStats MqStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mq_version(void);

/**
 * Message for the most recent failure on this thread. Borrowed; valid
 * until the next failing call on the same thread.
 */
const char *mq_last_error(void);

/**
 * Build a deterministic model.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
enum MqStatus mq_model_init(size_t d_model,
                            size_t d_inner,
                            size_t d_state,
                            size_t d_conv,
                            size_t dt_rank,
                            size_t n_blocks,
                            uint64_t seed,
                            double outlier_frac,
                            double outlier_gain,
                            struct MqModel **out);

/**
 * Load a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MqStatus mq_model_load(const char *path, struct MqModel **out);

/**
 * Save a model checkpoint.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum MqStatus mq_model_save(const struct MqModel *model, const char *path);

/**
 * Release a model handle.
 *
 * # Safety
 * `model` must have come from this library and not been freed already.
 */
void mq_model_free(struct MqModel *model);

/**
 * Report a model's dimensions. Null outputs are skipped.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum MqStatus mq_model_dims(const struct MqModel *model,
                            size_t *d_model,
                            size_t *d_inner,
                            size_t *d_state,
                            size_t *n_blocks);

/**
 * Synthesize calibration data for a model width.
 *
 * # Safety
 * `out` must be writable.
 */
enum MqStatus mq_calib_generate(size_t d_model,
                                size_t batch,
                                size_t tokens,
                                uint64_t seed,
                                enum MqDist dist,
                                struct MqCalib **out);

/**
 * Load a calibration-data file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum MqStatus mq_calib_load(const char *path, struct MqCalib **out);

/**
 * Save calibration data.
 *
 * # Safety
 * `calib` must be a live handle; `path` NUL-terminated.
 */
enum MqStatus mq_calib_save(const struct MqCalib *calib, const char *path);

/**
 * Release a calibration handle.
 *
 * # Safety
 * `calib` must have come from this library and not been freed already.
 */
void mq_calib_free(struct MqCalib *calib);

/**
 * Collect per-tap statistics for a model over calibration data.
 *
 * # Safety
 * `model` and `calib` must be live handles; `out` writable.
 */
enum MqStatus mq_stats_collect(const struct MqModel *model,
                               const struct MqCalib *calib,
                               struct MqStats **out);

/**
 * Release a statistics handle.
 *
 * # Safety
 * `stats` must have come from this library and not been freed already.
 */
void mq_stats_free(struct MqStats *stats);

/**
 * Apply a transformation scheme, producing a new model handle.
 *
 * # Safety
 * `model` and `stats` must be live handles; `out` writable.
 */
enum MqStatus mq_transform(const struct MqModel *model,
                           const struct MqStats *stats,
                           enum MqScheme scheme,
                           struct MqModel **out);

/**
 * Fake-quantize weights and attach activation quantization.
 *
 * `stats` may be null for dynamic activation mode; static mode requires
 * statistics collected on `model` itself.
 *
 * # Safety
 * `model` must be a live handle; `stats` live or null; `out` writable.
 */
enum MqStatus mq_quantize(const struct MqModel *model,
                          const struct MqStats *stats,
                          uint32_t bits_w,
                          uint32_t bits_a,
                          bool weights_per_channel,
                          bool activations_dynamic,
                          struct MqModel **out);

/**
 * Run a `[tokens, d_model]` row-major input through a model.
 *
 * # Safety
 * `input` and `output` must each point to `tokens * d_model` doubles.
 */
enum MqStatus mq_forward(const struct MqModel *model,
                         const double *input,
                         size_t tokens,
                         double *output);

/**
 * Compare two models on calibration data.
 *
 * # Safety
 * Handles must be live; non-null result pointers must be writable.
 */
enum MqStatus mq_equivalence(const struct MqModel *model_a,
                             const struct MqModel *model_b,
                             const struct MqCalib *probe,
                             double *max_abs,
                             double *max_rel,
                             double *cosine);

/**
 * Parameter and FLOP overhead (percent) of the fused transforms.
 *
 * # Safety
 * Non-null result pointers must be writable.
 */
enum MqStatus mq_cost_model(size_t d_inner,
                            size_t d_state,
                            size_t n_blocks,
                            size_t n_tokens,
                            double base_params,
                            double base_flops,
                            double *param_overhead_pct,
                            double *flop_overhead_pct);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MQUANT_H */
