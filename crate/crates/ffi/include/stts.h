#ifndef STTS_H
#define STTS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum SttsStatus {
  STTS_STATUS_OK = 0,
  STTS_STATUS_NULL_POINTER = 1,
  STTS_STATUS_DIMENSION = 2,
  STTS_STATUS_NUMERIC = 3,
  STTS_STATUS_INDEX = 4,
  STTS_STATUS_ARGUMENT = 5,
  STTS_STATUS_MODE = 6,
  STTS_STATUS_TAPE = 7,
  STTS_STATUS_PARSE = 8,
  STTS_STATUS_VERSION = 9,
  STTS_STATUS_FORMAT = 10,
  STTS_STATUS_IO = 11,
  STTS_STATUS_UTF8 = 12,
  STTS_STATUS_BUFFER_TOO_SMALL = 13,
  STTS_STATUS_PANIC = 14,
} SttsStatus;

// Opaque anchor grid.
typedef struct SttsAnchorGrid SttsAnchorGrid;

// Opaque trained model.
typedef struct SttsModel SttsModel;

// Parsed selection name. Absent clauses have `has_* = false`.
typedef struct SttsSelection {
  bool has_temporal;
  size_t temporal_layer;
  float temporal_ratio;
  bool has_spatial;
  size_t spatial_layer;
  float spatial_ratio;
} SttsSelection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread, NUL-terminated and
// truncated to `cap` bytes, into `buf`. Returns the full message length
// without the terminator.
//
// # Safety
// `buf` must be valid for `cap` bytes or null.
size_t stts_last_error_message(char *buf, size_t cap);

// Byte offset of the last parse error on this thread.
size_t stts_last_error_position(void);

// Hard Top-K: writes the `k` selected positions of `scores`, ascending.
//
// # Safety
// `scores` must hold `len` floats and `out_indices` room for `k` values.
enum SttsStatus stts_hard_topk(const float *scores, size_t len, size_t k, size_t *out_indices);

// Smoothed Top-K: writes the row-major `len×k` expected indicator.
//
// # Safety
// `scores` must hold `len` floats and `out_matrix` room for `len·k`.
enum SttsStatus stts_soft_topk(const float *scores,
                               size_t len,
                               size_t k,
                               float sigma,
                               size_t samples,
                               uint64_t seed,
                               float *out_matrix);

// Vector-Jacobian product of the smoothed Top-K for a row-major `len×k`
// upstream gradient; writes `len` values.
//
// # Safety
// `scores` and `out_grad` must hold `len` floats, `upstream` `len·k`.
enum SttsStatus stts_soft_topk_vjp(const float *scores,
                                   size_t len,
                                   size_t k,
                                   float sigma,
                                   size_t samples,
                                   uint64_t seed,
                                   const float *upstream,
                                   float *out_grad);

// Builds the `P×P` windows at stride `s` over an `h×w` token grid.
//
// # Safety
// `out` must be a valid pointer; on success it receives a handle to free
// with [`stts_anchor_grid_free`].
enum SttsStatus stts_anchor_grid_new(size_t h,
                                     size_t w,
                                     size_t p,
                                     size_t s,
                                     struct SttsAnchorGrid **out);

// # Safety
// `grid` must come from [`stts_anchor_grid_new`] and `out` be valid.
enum SttsStatus stts_anchor_grid_count(const struct SttsAnchorGrid *grid, size_t *out);

// Writes the `P²` token indices of anchor `index`, row-major.
//
// # Safety
// `grid` must come from [`stts_anchor_grid_new`]; `out_tokens` must hold
// `cap` values.
enum SttsStatus stts_anchor_grid_tokens(const struct SttsAnchorGrid *grid,
                                        size_t index,
                                        size_t *out_tokens,
                                        size_t cap);

// # Safety
// `grid` must come from [`stts_anchor_grid_new`] and not be used again.
void stts_anchor_grid_free(struct SttsAnchorGrid *grid);

// Parses a selection name such as `tiny-T0_0.4-S2_0.6`. On a parse error
// [`stts_last_error_position`] gives the offending byte offset.
//
// # Safety
// `name` must be NUL-terminated; `out` must be valid.
enum SttsStatus stts_parse_selection(const char *name, struct SttsSelection *out);

// Forward FLOPs of a selection name and of its backbone without selection.
//
// # Safety
// `name` must be NUL-terminated; `out_total` and `out_baseline` valid.
enum SttsStatus stts_count_flops(const char *name, uint64_t *out_total, uint64_t *out_baseline);

// Loads a checkpoint and its sidecar.
//
// # Safety
// `path` must be NUL-terminated; `out` valid. Free the handle with
// [`stts_model_free`].
enum SttsStatus stts_model_load(const char *path, struct SttsModel **out);

// Input shape `[frames, height, width, channels]` and class count.
//
// # Safety
// `model` from [`stts_model_load`]; `out_shape` holds 4 values.
enum SttsStatus stts_model_shape(const struct SttsModel *model,
                                 size_t *out_shape,
                                 size_t *out_classes);

// Hard-selection forward pass of one clip laid out frame, row, column,
// channel. Writes `classes` logits.
//
// # Safety
// `pixels` holds `len` floats; `out_logits` holds `classes` floats.
enum SttsStatus stts_model_forward(const struct SttsModel *model,
                                   const float *pixels,
                                   size_t len,
                                   float *out_logits,
                                   size_t classes);

// # Safety
// `model` must come from [`stts_model_load`] and not be used again.
void stts_model_free(struct SttsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STTS_H */
