#ifndef PARAPATH_H
#define PARAPATH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ParapathStatus {
  PARAPATH_STATUS_OK = 0,
  PARAPATH_STATUS_NULL_POINTER = 1,
  PARAPATH_STATUS_INVALID_ARGUMENT = 2,
  PARAPATH_STATUS_IO = 3,
  PARAPATH_STATUS_PARSE = 4,
  PARAPATH_STATUS_CONFIG = 5,
  PARAPATH_STATUS_CHECKPOINT = 6,
  PARAPATH_STATUS_BUFFER_TOO_SMALL = 7,
  PARAPATH_STATUS_INTERNAL = 8,
} ParapathStatus;

typedef enum ParapathMode {
  PARAPATH_MODE_SINGLE_PREFIX = 0,
  PARAPATH_MODE_AGGREGATE = 1,
  PARAPATH_MODE_NO_PREFIX = 2,
} ParapathMode;

/**
 * Opaque model handle.
 */
typedef struct ParapathModel ParapathModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads the model stored in a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ParapathStatus parapath_model_load(const char *path, struct ParapathModel **out);

/**
 * Freshly initialized model from config text (`field = value` lines).
 *
 * # Safety
 * `config_text` must be a NUL-terminated string; `out` must be writable.
 */
enum ParapathStatus parapath_model_init(const char *config_text, struct ParapathModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void parapath_model_free(struct ParapathModel *model);

/**
 * Embedding width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t parapath_model_dim(const struct ParapathModel *model);

/**
 * Number of parallel paths, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t parapath_model_num_paths(const struct ParapathModel *model);

/**
 * Encodes `text` into `out`, which holds `out_len` doubles (at least the model width).
 *
 * # Safety
 * `model` must be a live handle, `text` NUL-terminated, `out` valid for `out_len` writes.
 */
enum ParapathStatus parapath_encode(const struct ParapathModel *model,
                                    const char *text,
                                    enum ParapathMode mode,
                                    double *out,
                                    size_t out_len);

/**
 * Multiply-adds of one encode of `seq_len` tokens.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum ParapathStatus parapath_op_count(const struct ParapathModel *model,
                                      enum ParapathMode mode,
                                      size_t seq_len,
                                      uint64_t *out);

/**
 * Precision@1 of row-major `queries` (`num_queries × dim`) against
 * `targets` (`num_targets × dim`) with gold target indices.
 *
 * # Safety
 * Each pointer must be valid for the number of elements its sizes imply.
 */
enum ParapathStatus parapath_precision_at_1(const double *queries,
                                            size_t num_queries,
                                            const double *targets,
                                            size_t num_targets,
                                            size_t dim,
                                            const size_t *gold,
                                            double *out);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`) and returns the full message length; 0 if none.
 *
 * # Safety
 * `buf` must be null or valid for `len` writes.
 */
size_t parapath_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *parapath_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARAPATH_H */
