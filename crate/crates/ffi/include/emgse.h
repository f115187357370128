#ifndef EMGSE_H
#define EMGSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  EMGSE_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  EMGSE_STATUS_NULL_POINTER = 1,
  /**
   * Malformed argument (bad UTF-8 path, wrong length, ...).
   */
  EMGSE_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Inconsistent configuration or a checkpoint that does not fit.
   */
  EMGSE_STATUS_CONFIG = 3,
  /**
   * Input data rejected by the model.
   */
  EMGSE_STATUS_INPUT = 4,
  /**
   * Non-finite values during computation.
   */
  EMGSE_STATUS_NUMERIC = 5,
  EMGSE_STATUS_IO = 6,
  /**
   * The output buffer is too small; the required length was written.
   */
  EMGSE_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  EMGSE_STATUS_PANIC = 8,
} EmgseStatus;

/**
 * A loaded enhancement network.
 */
typedef struct EmgseEnhancer EmgseEnhancer;

/**
 * A loaded EMG-to-speech model.
 */
typedef struct EmgseStage1 EmgseStage1;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *emgse_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *emgse_version(void);

/**
 * Loads an enhancement checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
EmgseStatus emgse_enhancer_load(const char *path, EmgseEnhancer **out);

/**
 * Releases a handle from [`emgse_enhancer_load`]. Null is ignored.
 *
 * # Safety
 * `h` must come from [`emgse_enhancer_load`] and not be used afterwards.
 */
void emgse_enhancer_free(EmgseEnhancer *h);

/**
 * Writes 1 to `*out` if the network expects an auxiliary speech signal.
 *
 * # Safety
 * `h` must be a live handle and `out` writable.
 */
EmgseStatus emgse_enhancer_is_multimodal(const EmgseEnhancer *h, int32_t *out);

/**
 * Enhances `len` noisy samples into `out` (also `len` samples). `aux`
 * must hold `len` samples for a multimodal network and may be null
 * otherwise. A nonzero `pass_through` applies a unit mask and keeps the
 * noisy phase.
 *
 * # Safety
 * `noisy` and `out` must hold `len` values; `aux`, when non-null, too.
 */
EmgseStatus emgse_enhance(const EmgseEnhancer *h,
                          const double *noisy,
                          const double *aux,
                          size_t len,
                          int32_t pass_through,
                          double *out);

/**
 * Loads an EMG-to-speech checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
EmgseStatus emgse_stage1_load(const char *path, EmgseStage1 **out);

/**
 * Releases a handle from [`emgse_stage1_load`]. Null is ignored.
 *
 * # Safety
 * `h` must come from [`emgse_stage1_load`] and not be used afterwards.
 */
void emgse_stage1_free(EmgseStage1 *h);

/**
 * Converts `frames` EMG frames (8 interleaved channels each) into 16 kHz
 * speech. The result has `16 * frames` samples; `*out_len` receives that
 * number. If `cap` is smaller, nothing is written to `out` and
 * `BufferTooSmall` is returned, so callers may query with `cap == 0`.
 *
 * # Safety
 * `emg` must hold `8 * frames` values, `out` `cap` values (may be null
 * when `cap == 0`), and `out_len` must be writable.
 */
EmgseStatus emgse_stage1_emg_to_speech(const EmgseStage1 *h,
                                       const float *emg,
                                       size_t frames,
                                       double *out,
                                       size_t cap,
                                       size_t *out_len);

/**
 * STOI of `degraded` against `clean`, both `len` samples at 16 kHz.
 *
 * # Safety
 * Both buffers must hold `len` values and `out` must be writable.
 */
EmgseStatus emgse_stoi(const double *clean, const double *degraded, size_t len, double *out);

/**
 * Scale-invariant SDR (dB) of `estimate` against `clean`.
 *
 * # Safety
 * Both buffers must hold `len` values and `out` must be writable.
 */
EmgseStatus emgse_si_sdr(const double *clean, const double *estimate, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMGSE_H */
