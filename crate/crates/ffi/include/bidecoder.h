#ifndef BIDECODER_H
#define BIDECODER_H

/* Generated with cbindgen from crates/ffi/src/lib.rs; regenerate with `cargo build -p bidecoder-ffi --features header`. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BdOrder {
  BD_ORDER_LEFT_TO_RIGHT = 0,
  BD_ORDER_BIDIRECTIONAL = 1,
  BD_ORDER_MULTI_DIRECTIONAL = 2,
  BD_ORDER_MIDDLE_TO_SIDE = 3,
} BdOrder;

typedef enum BdStatus {
  BD_STATUS_OK = 0,
  BD_STATUS_NULL_POINTER = 1,
  BD_STATUS_INVALID_ARGUMENT = 2,
  BD_STATUS_IO = 3,
  BD_STATUS_CHECKPOINT = 4,
  /**
   * Malformed input tokens or schedule.
   */
  BD_STATUS_DATA = 5,
  /**
   * Non-finite values during computation.
   */
  BD_STATUS_NUMERIC = 6,
  /**
   * The output buffer is too small; the required length was written.
   */
  BD_STATUS_BUFFER_TOO_SMALL = 7,
  BD_STATUS_PANIC = 8,
} BdStatus;

/**
 * Opaque model handle.
 */
typedef struct BdModel BdModel;

typedef struct BdModelInfo {
  size_t vocab_src;
  size_t vocab_tgt;
  enum BdOrder order;
  /**
   * Number of generation directions.
   */
  size_t directions;
  /**
   * Tokens per direction per step.
   */
  size_t per_direction;
  /**
   * Tokens produced per decoding step.
   */
  size_t step_width;
  size_t max_len;
} BdModelInfo;

typedef struct BdDecodeOptions {
  size_t beam;
  /**
   * Maximum generated slots.
   */
  size_t max_len;
  /**
   * Remove repeated n-grams up to this order; 0 disables.
   */
  size_t dedup_n;
} BdDecodeOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string, truncating if needed. Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `capacity` writable bytes.
 */
size_t bd_last_error(char *buf, size_t capacity);

/**
 * Loads a checkpoint. On success `*out` holds a handle that must be passed
 * to `bd_model_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum BdStatus bd_model_load(const char *path, struct BdModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `bd_model_load` and not be used afterwards.
 */
void bd_model_free(struct BdModel *model);

/**
 * # Safety
 * `model` must be a live handle and `info` writable.
 */
enum BdStatus bd_model_info(const struct BdModel *model, struct BdModelInfo *info);

/**
 * Beam-decodes one source sentence into `out` (natural order, no EOS).
 * `steps` may be null; otherwise it receives the number of decoding steps.
 * When `out_capacity` is too small, `BufferTooSmall` is returned and
 * `*out_len` holds the required length.
 *
 * # Safety
 * `src` must hold `src_len` tokens, `out` must hold `out_capacity` tokens,
 * and `out_len` must be writable.
 */
enum BdStatus bd_decode(const struct BdModel *model,
                        const uint32_t *src,
                        size_t src_len,
                        struct BdDecodeOptions options,
                        uint32_t *out,
                        size_t out_capacity,
                        size_t *out_len,
                        size_t *steps);

/**
 * Natural-order position (1-based) of every schedule slot for a length-`n`
 * target; 0 marks a padding slot. `directions` is only read for the
 * multi-directional order.
 *
 * # Safety
 * `out` must hold `out_capacity` values and `out_len` must be writable.
 */
enum BdStatus bd_schedule_order(enum BdOrder order,
                                size_t directions,
                                size_t per_direction,
                                size_t n,
                                size_t *out,
                                size_t out_capacity,
                                size_t *out_len);

/**
 * Number of decoding steps (start block excluded, EOS step included) that
 * the schedule needs to emit a length-`n` output.
 *
 * # Safety
 * `steps` must be writable.
 */
enum BdStatus bd_schedule_steps(enum BdOrder order,
                                size_t directions,
                                size_t per_direction,
                                size_t n,
                                size_t *steps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BIDECODER_H */
