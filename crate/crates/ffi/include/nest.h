#ifndef NEST_H
#define NEST_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum NestStatus {
  NEST_STATUS_OK = 0,
  NEST_STATUS_NULL_POINTER = 1,
  NEST_STATUS_INVALID_ARGUMENT = 2,
  NEST_STATUS_IO = 3,
  NEST_STATUS_PARSE = 4,
  NEST_STATUS_SHAPE = 5,
  NEST_STATUS_OUT_OF_RANGE = 6,
  NEST_STATUS_BUFFER_TOO_SMALL = 7,
  NEST_STATUS_INTERNAL = 99,
} NestStatus;

/**
 * A trained classifier with its preprocessing and cutoff.
 */
typedef struct NestModel NestModel;

/**
 * Traces read from a JSON-lines file.
 */
typedef struct NestTraces NestTraces;

/**
 * Borrowed view of one trace in caller memory: `n_states * dim` row-major
 * values and `n_states - 1` action codes.
 */
typedef struct NestTraceView {
  const double *states;
  size_t n_states;
  size_t dim;
  const uint8_t *actions;
  /**
   * Family name used for per-family preprocessing; null means benign.
   */
  const char *family;
  /**
   * Non-zero when `states` are raw and must go through the model's
   * denoising and normalization first.
   */
  int32_t raw;
} NestTraceView;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *nest_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nest_version(void);

/**
 * Loads a checkpoint JSON file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NestStatus nest_model_load(const char *path, struct NestModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`nest_model_load`] and not be used afterwards.
 */
void nest_model_free(struct NestModel *model);

/**
 * Number of channels per state the model expects.
 *
 * # Safety
 * Pointers must be valid.
 */
enum NestStatus nest_model_state_dim(const struct NestModel *model, size_t *out);

/**
 * Decision cutoff: a trace is ransomware iff its score exceeds it.
 *
 * # Safety
 * Pointers must be valid.
 */
enum NestStatus nest_model_threshold(const struct NestModel *model, double *out);

/**
 * Ransomware probability of a whole trace.
 *
 * # Safety
 * Pointers must be valid and buffers sized as described by the view.
 */
enum NestStatus nest_model_score(const struct NestModel *model,
                                 const struct NestTraceView *trace,
                                 double *out_score);

/**
 * Score plus decision: `*out_ransomware` is 1 when the score exceeds the
 * model threshold, else 0. `out_score` may be null.
 *
 * # Safety
 * Pointers must be valid and buffers sized as described by the view.
 */
enum NestStatus nest_model_classify(const struct NestModel *model,
                                    const struct NestTraceView *trace,
                                    int32_t *out_ransomware,
                                    double *out_score);

/**
 * Early detection over growing prefixes. `*out_detected` is 1 and
 * `*out_window` the end window of the first run of `persistence` positive
 * prefixes evaluated every `stride` windows; otherwise 0 and 0.
 *
 * # Safety
 * Pointers must be valid and buffers sized as described by the view.
 */
enum NestStatus nest_model_classify_prefix(const struct NestModel *model,
                                           const struct NestTraceView *trace,
                                           size_t stride,
                                           size_t persistence,
                                           int32_t *out_detected,
                                           size_t *out_window);

/**
 * Reads a JSON-lines trace file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NestStatus nest_traces_load(const char *path, struct NestTraces **out);

/**
 * Releases a trace collection. Null is ignored.
 *
 * # Safety
 * `traces` must come from [`nest_traces_load`] and not be used afterwards.
 */
void nest_traces_free(struct NestTraces *traces);

/**
 * Number of traces in the collection.
 *
 * # Safety
 * Pointers must be valid.
 */
enum NestStatus nest_traces_len(const struct NestTraces *traces, size_t *out);

/**
 * State count and channel count of trace `index`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum NestStatus nest_traces_dims(const struct NestTraces *traces,
                                 size_t index,
                                 size_t *out_states,
                                 size_t *out_dim);

/**
 * 1 for ransomware, 0 for benign.
 *
 * # Safety
 * Pointers must be valid.
 */
enum NestStatus nest_traces_label(const struct NestTraces *traces, size_t index, int32_t *out);

/**
 * Copies the row-major states of trace `index` into `buf` (`len` values).
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum NestStatus nest_traces_copy_states(const struct NestTraces *traces,
                                        size_t index,
                                        double *buf,
                                        size_t len);

/**
 * Copies the action codes of trace `index` into `buf` (`len` bytes).
 *
 * # Safety
 * `buf` must hold `len` bytes.
 */
enum NestStatus nest_traces_copy_actions(const struct NestTraces *traces,
                                         size_t index,
                                         uint8_t *buf,
                                         size_t len);

/**
 * Kernel flow of a `dim`-component state with an odd-length kernel; writes
 * `dim` values to `out`.
 *
 * # Safety
 * `state` and `out` must hold `dim` doubles, `kernel` `kernel_len`.
 */
enum NestStatus nest_kernel_flow(const double *state,
                                 size_t dim,
                                 const double *kernel,
                                 size_t kernel_len,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEST_H */
