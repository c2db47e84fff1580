#ifndef ORTHOPRUNE_H
#define ORTHOPRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible function.
 */
typedef enum OpStatus {
  OP_STATUS_OK = 0,
  OP_STATUS_NULL_POINTER = 1,
  OP_STATUS_INVALID_ARGUMENT = 2,
  OP_STATUS_SHAPE = 3,
  OP_STATUS_MODEL = 4,
  OP_STATUS_PLAN = 5,
  OP_STATUS_CONFIG = 6,
  OP_STATUS_IO = 7,
  OP_STATUS_FORMAT = 8,
  OP_STATUS_NUMERIC = 9,
  OP_STATUS_INTERNAL = 10,
  OP_STATUS_PANIC = 11,
} OpStatus;

typedef enum OpFamily {
  OP_FAMILY_PLAIN = 0,
  OP_FAMILY_RESIDUAL = 1,
  OP_FAMILY_DEPTHSEP = 2,
} OpFamily;

/**
 * Opaque network handle.
 */
typedef struct OpModel OpModel;

typedef struct OpCompression {
  uint64_t params_original;
  uint64_t params_pruned;
  uint64_t flops_original;
  uint64_t flops_pruned;
  double cr;
  double flops_reduction;
  double eff;
} OpCompression;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *op_last_error(void);

/**
 * NUL-terminated crate version. Static storage.
 */
const char *op_version(void);

/**
 * Builds a freshly initialized network.
 *
 * # Safety
 * `widths` must point to `n_widths` values and `out` must be writable.
 */
enum OpStatus op_model_new(enum OpFamily family,
                           const size_t *widths,
                           size_t n_widths,
                           size_t in_channels,
                           size_t classes,
                           uint64_t seed,
                           struct OpModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` must be writable.
 */
enum OpStatus op_model_load(const char *path, struct OpModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum OpStatus op_model_save(const struct OpModel *model, const char *path);

/**
 * # Safety
 * `model` must be a live handle and `out` must be writable.
 */
enum OpStatus op_model_clone(const struct OpModel *model, struct OpModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void op_model_free(struct OpModel *model);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t op_model_classes(const struct OpModel *model);

/**
 * Input channels expected by `op_model_predict`, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t op_model_in_channels(const struct OpModel *model);

/**
 * Weights plus batchnorm affine parameters.
 *
 * # Safety
 * `model` must be a live handle and `out` must be writable.
 */
enum OpStatus op_model_param_count(const struct OpModel *model, uint64_t *out);

/**
 * Convolution multiply-accumulates for one `h` x `w` input.
 *
 * # Safety
 * `model` must be a live handle and `out` must be writable.
 */
enum OpStatus op_model_flops(const struct OpModel *model, size_t h, size_t w, uint64_t *out);

/**
 * Eval-mode logits for `n` images stored as `[n, in_channels, h, w]`
 * row-major. `logits` receives `n * classes` values.
 *
 * # Safety
 * `images` must hold `n * in_channels * h * w` values and `logits` must
 * have room for `logits_len` values.
 */
enum OpStatus op_model_predict(const struct OpModel *model,
                               const double *images,
                               size_t n,
                               size_t h,
                               size_t w,
                               double *logits,
                               size_t logits_len);

/**
 * Scores every prunable filter with `metric` ("taylor", "tfo", "fisher",
 * "l1", "bn_scale"), removes `fraction` of them and writes the smaller
 * network to `out`. Data-free metrics accept a null `images`/`labels`
 * with `n == 0`.
 *
 * # Safety
 * `model` must be a live handle, `metric` a NUL-terminated string,
 * `images` must hold `n * in_channels * h * w` values, `labels` `n`
 * values, and `out` must be writable.
 */
enum OpStatus op_model_prune(const struct OpModel *model,
                             const char *metric,
                             double fraction,
                             const double *images,
                             const uint32_t *labels,
                             size_t n,
                             size_t h,
                             size_t w,
                             struct OpModel **out);

/**
 * Parameter and FLOP reduction of `pruned` relative to `original` for
 * one `h` x `w` input.
 *
 * # Safety
 * Both handles must be live and `out` must be writable.
 */
enum OpStatus op_compression_report(const struct OpModel *original,
                                    const struct OpModel *pruned,
                                    size_t h,
                                    size_t w,
                                    struct OpCompression *out);

/**
 * Efficiency scalar for a compression rate and a FLOP reduction given as
 * a fraction.
 */
double op_efficiency(double cr, double flops_reduction);

/**
 * Per-round fractions that remove `total` of the filters over `rounds`
 * rounds. `out` receives `rounds` values.
 *
 * # Safety
 * `out` must have room for `out_len` values.
 */
enum OpStatus op_schedule(double total, size_t rounds, double *out, size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ORTHOPRUNE_H */
