#ifndef LPRNET_H
#define LPRNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum LprStatus {
  LPR_STATUS_OK = 0,
  LPR_STATUS_NULL_POINTER = 1,
  LPR_STATUS_INVALID_ARGUMENT = 2,
  LPR_STATUS_IO = 3,
  LPR_STATUS_FORMAT = 4,
  LPR_STATUS_CONFIG = 5,
  LPR_STATUS_SHAPE = 6,
  LPR_STATUS_NO_TEMPLATE_MATCH = 7,
  LPR_STATUS_BUFFER_TOO_SMALL = 8,
  LPR_STATUS_INTERNAL = 9,
} LprStatus;

/**
 * Decoding strategy for [`lpr_recognize`].
 */
typedef enum LprDecoder {
  LPR_DECODER_GREEDY = 0,
  LPR_DECODER_BEAM = 1,
} LprDecoder;

/**
 * Opaque recognizer handle.
 */
typedef struct LprRecognizer LprRecognizer;

/**
 * Options for [`lpr_recognize`]. `templates` is optional template text (one
 * template per line) used to post-filter beam candidates; it may be NULL.
 */
typedef struct LprDecodeOptions {
  enum LprDecoder decoder;
  uint32_t beam_width;
  const char *templates;
} LprDecodeOptions;

/**
 * Operation counts of a loaded model.
 */
typedef struct LprFlops {
  /**
   * Multiply-accumulates of convolution and dense layers.
   */
  uint64_t macs;
  /**
   * Two operations per multiply-accumulate plus bias additions.
   */
  uint64_t flops;
  /**
   * Pooling, normalization, activation and sampling operations.
   */
  uint64_t aux;
} LprFlops;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model configuration file and its weight file.
 *
 * # Safety
 * `config_path` and `weights_path` must be NUL-terminated strings; `out`
 * must be writable. On success `*out` receives a handle to be released with
 * [`lpr_recognizer_free`].
 */
enum LprStatus lpr_recognizer_open(const char *config_path,
                                   const char *weights_path,
                                   struct LprRecognizer **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `rec` must be NULL or a handle from [`lpr_recognizer_open`] not yet freed.
 */
void lpr_recognizer_free(struct LprRecognizer *rec);

/**
 * Output sequence length and class count (including the blank) of the model.
 *
 * # Safety
 * `rec` must be a live handle; `steps` and `classes` must be writable.
 */
enum LprStatus lpr_recognizer_dims(const struct LprRecognizer *rec, size_t *steps, size_t *classes);

/**
 * Recognizes a 94x24 interleaved 8-bit RGB image. The decoded plate is
 * written to `*label_out` as a UTF-8 string to be released with
 * [`lpr_string_free`], and its probability to `*prob_out` (either may be
 * NULL). `opts` may be NULL for greedy decoding.
 *
 * # Safety
 * `rgb` must hold `width * height * 3` bytes; pointers must be NULL or valid.
 */
enum LprStatus lpr_recognize(const struct LprRecognizer *rec,
                             const uint8_t *rgb,
                             size_t width,
                             size_t height,
                             const struct LprDecodeOptions *opts,
                             char **label_out,
                             double *prob_out);

/**
 * Writes the per-step class probabilities (steps x classes, row-major) of
 * an image into `out`. `*written` receives the number of values required;
 * if `out_len` is smaller, nothing is copied and `BufferTooSmall` is
 * returned.
 *
 * # Safety
 * `out` must hold `out_len` floats; `written` must be writable.
 */
enum LprStatus lpr_probabilities(const struct LprRecognizer *rec,
                                 const uint8_t *rgb,
                                 size_t width,
                                 size_t height,
                                 float *out,
                                 size_t out_len,
                                 size_t *written);

/**
 * Operation counts of the loaded model.
 *
 * # Safety
 * `rec` must be a live handle; `out` must be writable.
 */
enum LprStatus lpr_flops(const struct LprRecognizer *rec, struct LprFlops *out);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must be NULL or a string from [`lpr_recognize`] not yet freed.
 */
void lpr_string_free(char *s);

/**
 * Message describing the last failure on this thread, or NULL. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *lpr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lpr_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPRNET_H */
