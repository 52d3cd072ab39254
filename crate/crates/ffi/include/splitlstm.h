#ifndef SPLITLSTM_H
#define SPLITLSTM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SlDtype {
  // Keep the precision stored in the file.
  SL_DTYPE_NATIVE = 0,
  SL_DTYPE_F32 = 1,
  SL_DTYPE_Q8 = 2,
} SlDtype;

typedef enum SlPlan {
  SL_PLAN_LSTM_DO_S = 0,
  SL_PLAN_SPLIT_A = 1,
  SL_PLAN_SPLIT_B = 2,
} SlPlan;

typedef enum SlStatus {
  SL_STATUS_OK = 0,
  SL_STATUS_NULL_POINTER = 1,
  SL_STATUS_INVALID_ARGUMENT = 2,
  SL_STATUS_IO = 3,
  // Unreadable or corrupt model file, or malformed wire data.
  SL_STATUS_FORMAT = 4,
  SL_STATUS_SHAPE = 5,
  SL_STATUS_HASH_MISMATCH = 6,
  SL_STATUS_NETWORK = 7,
  SL_STATUS_BUFFER_TOO_SMALL = 8,
  SL_STATUS_INTERNAL = 99,
} SlStatus;

// A loaded model in deployment precision.
typedef struct SlModel SlModel;

// A running server half; stop it with [`sl_server_stop`].
typedef struct SlServer SlServer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sl_version(void);

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `cap`). Returns the full message length in bytes
// excluding the terminator.
//
// # Safety
// `buf` must be NULL or point to `cap` writable bytes.
size_t sl_last_error(char *buf, size_t cap);

// Loads a float or quantized model file. With `dtype = Q8`, a float file is
// quantized on load to Q`int_bits`.(8 - `int_bits`); `int_bits` is ignored
// otherwise unless the file is already quantized, in which case a nonzero
// value must match the stored format.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for a write.
enum SlStatus sl_model_load(const char *path,
                            enum SlDtype dtype,
                            uint8_t int_bits,
                            struct SlModel **out);

// # Safety
// `model` must be NULL or a handle from [`sl_model_load`] not yet freed.
void sl_model_free(struct SlModel *model);

// Parameter count and window length of a loaded model.
//
// # Safety
// `model` must be a live handle; outputs must be NULL or writable.
enum SlStatus sl_model_info(const struct SlModel *model,
                            size_t *param_count,
                            size_t *window_length,
                            bool *is_quantized);

// Unsplit inference on one normalized window of `len` values.
//
// # Safety
// `window` must point to `len` readable doubles; `out` must be writable.
enum SlStatus sl_model_predict(const struct SlModel *model,
                               const double *window,
                               size_t len,
                               double *out);

// Number of elements the edge sends under `plan`.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum SlStatus sl_intermediate_size(const struct SlModel *model, enum SlPlan plan, size_t *out);

// Runs the edge half under `plan` and writes `z` (dequantized for q8
// models) into `z_out`. `z_len` receives the element count; when it exceeds
// `cap` nothing is written and `SL_STATUS_BUFFER_TOO_SMALL` is returned.
//
// # Safety
// `window` must point to `len` doubles; `z_out` to `cap` writable doubles.
enum SlStatus sl_edge_forward(const struct SlModel *model,
                              enum SlPlan plan,
                              const double *window,
                              size_t len,
                              double *z_out,
                              size_t cap,
                              size_t *z_len);

// Starts serving the server half of `model` under `plan` on `endpoint`
// (`host:port`; port 0 picks a free one). The model handle may be freed
// afterwards.
//
// # Safety
// `endpoint` must be NUL-terminated; `out` must be writable.
enum SlStatus sl_server_start(const struct SlModel *model,
                              enum SlPlan plan,
                              const char *endpoint,
                              struct SlServer **out);

// Port the server is bound to, or 0 for NULL.
//
// # Safety
// `server` must be NULL or a live handle.
uint16_t sl_server_port(const struct SlServer *server);

// Stops the server, waits for open connections, and frees the handle.
//
// # Safety
// `server` must be NULL or a handle from [`sl_server_start`] not yet stopped.
void sl_server_stop(struct SlServer *server);

// Split inference over `n_windows` row-major windows of `window_len`
// values against the server at `endpoint`; writes one prediction per window.
// Any failed window fails the call with `SL_STATUS_NETWORK` (or the
// matching code) and leaves `out` unspecified.
//
// # Safety
// `windows` must point to `n_windows * window_len` doubles and `out` to
// `n_windows` writable doubles.
enum SlStatus sl_edge_infer(const struct SlModel *model,
                            enum SlPlan plan,
                            const char *endpoint,
                            const double *windows,
                            size_t n_windows,
                            size_t window_len,
                            double *out);

// `size_kb(teacher) / size_kb(student)`; NaN when `student_params` is 0.
double sl_compression_ratio(size_t teacher_params, size_t student_params);

// Accelerator instances that fit: `min floor(total[r] / pe[r])` over the
// four resource classes (BRAM, DSP, LUT, FF).
//
// # Safety
// `total` and `pe` must each point to 4 doubles; `out` must be writable.
enum SlStatus sl_scalability(const double *total, const double *pe, uint32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLITLSTM_H */
