#ifndef FLEXTOK_H
#define FLEXTOK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call. `FLEXTOK_STATUS_OK` is zero.
 */
typedef enum FlextokStatus {
  FLEXTOK_STATUS_OK = 0,
  FLEXTOK_STATUS_NULL_ARGUMENT = 1,
  FLEXTOK_STATUS_INVALID_ARGUMENT = 2,
  FLEXTOK_STATUS_BUFFER_TOO_SMALL = 3,
  FLEXTOK_STATUS_SHAPE = 4,
  FLEXTOK_STATUS_VALIDATION = 5,
  FLEXTOK_STATUS_CONFIG = 6,
  FLEXTOK_STATUS_NON_FINITE = 7,
  FLEXTOK_STATUS_OUT_OF_RANGE = 8,
  FLEXTOK_STATUS_FORMAT = 9,
  FLEXTOK_STATUS_CHECKPOINT_MISMATCH = 10,
  FLEXTOK_STATUS_IO = 11,
  FLEXTOK_STATUS_TENSOR = 12,
  FLEXTOK_STATUS_PANIC = 13,
} FlextokStatus;

/**
 * A loaded token generator.
 */
typedef struct FlextokGenerator FlextokGenerator;

/**
 * A loaded tokenizer with the codec and settings it was trained with.
 */
typedef struct FlextokTokenizer FlextokTokenizer;

/**
 * Static facts about a loaded tokenizer.
 */
typedef struct FlextokTokenizerInfo {
  /**
   * Longest token sequence.
   */
  uint32_t k_max;
  /**
   * Number of distinct token codes.
   */
  uint32_t vocab_size;
  uint32_t image_height;
  uint32_t image_width;
} FlextokTokenizerInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *flextok_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into the library from this thread.
 */
const char *flextok_last_error(void);

/**
 * Load a tokenizer checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FlextokStatus flextok_tokenizer_open(const char *path, struct FlextokTokenizer **out);

/**
 * Release a tokenizer handle. NULL is ignored.
 *
 * # Safety
 * `handle` must come from [`flextok_tokenizer_open`] and not be used afterwards.
 */
void flextok_tokenizer_close(struct FlextokTokenizer *handle);

/**
 * # Safety
 * `handle` must be a live tokenizer handle and `out` a valid pointer.
 */
enum FlextokStatus flextok_tokenizer_info(const struct FlextokTokenizer *handle,
                                          struct FlextokTokenizerInfo *out);

/**
 * Encode one image into its first `k` token codes, written to `codes`
 * (room for `capacity` values).
 *
 * # Safety
 * `pixels` must hold `height·width·3` floats and `codes` `capacity` slots.
 */
enum FlextokStatus flextok_tokenize(const struct FlextokTokenizer *handle,
                                    const float *pixels,
                                    size_t height,
                                    size_t width,
                                    size_t k,
                                    uint32_t *codes,
                                    size_t capacity);

/**
 * Decode `n_codes` tokens into an image written to `pixels` (room for
 * `capacity` floats, at least `height·width·3` from the info struct).
 * Sampler settings come from the checkpoint's run config; `seed` picks
 * the starting noise.
 *
 * # Safety
 * `codes` must hold `n_codes` values and `pixels` `capacity` slots.
 */
enum FlextokStatus flextok_detokenize(const struct FlextokTokenizer *handle,
                                      const uint32_t *codes,
                                      size_t n_codes,
                                      uint64_t seed,
                                      float *pixels,
                                      size_t capacity);

/**
 * Load a generator checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FlextokStatus flextok_generator_open(const char *path, struct FlextokGenerator **out);

/**
 * Release a generator handle. NULL is ignored.
 *
 * # Safety
 * `handle` must come from [`flextok_generator_open`] and not be used afterwards.
 */
void flextok_generator_close(struct FlextokGenerator *handle);

/**
 * Sample `k` token codes for class `class` (negative for unconditional)
 * into `codes`. Sampling settings come from the checkpoint's run config.
 *
 * # Safety
 * `codes` must have room for `capacity` values.
 */
enum FlextokStatus flextok_generate(const struct FlextokGenerator *handle,
                                    int64_t class_,
                                    size_t k,
                                    uint64_t seed,
                                    uint32_t *codes,
                                    size_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLEXTOK_H */
