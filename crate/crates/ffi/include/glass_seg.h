#ifndef GLASS_SEG_H
#define GLASS_SEG_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GsStatus {
  GS_STATUS_OK = 0,
  GS_STATUS_NULL_POINTER = 1,
  GS_STATUS_INVALID_ARGUMENT = 2,
  GS_STATUS_IO = 3,
  GS_STATUS_CHECKPOINT = 4,
  GS_STATUS_PANIC = 5,
} GsStatus;

/**
 * Opaque model handle.
 */
typedef struct GsModel GsModel;

typedef struct GsMetrics {
  double iou;
  double f_beta;
  double mae;
  double ber;
} GsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call.
 */
const char *gs_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *gs_version(void);

/**
 * Freshly initialised model of `variant` (e.g. `"full"`) with default settings.
 *
 * # Safety
 * `variant` must be a NUL-terminated string; `out` must be writable.
 */
enum GsStatus gs_model_new_default(const char *variant, uint64_t seed, struct GsModel **out);

/**
 * Model described by the TOML config at `config_path` (null for defaults)
 * with weights from the checkpoint at `checkpoint_path`.
 *
 * # Safety
 * String arguments must be NUL-terminated or null where allowed; `out` must be writable.
 */
enum GsStatus gs_model_load(const char *config_path,
                            const char *checkpoint_path,
                            struct GsModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void gs_model_free(struct GsModel *model);

/**
 * Glass confidence for an interleaved RGB8 image. `out_confidence` receives
 * `height * width` values in [0, 1]. Both sides must be multiples of 32.
 *
 * # Safety
 * `rgb` must hold `3 * height * width` bytes and `out_confidence` room for
 * `height * width` floats.
 */
enum GsStatus gs_model_predict(const struct GsModel *model,
                               const uint8_t *rgb,
                               size_t height,
                               size_t width,
                               float *out_confidence);

/**
 * IoU, F-measure (with `beta_sq`), MAE and BER of a binary prediction
 * against a binary ground truth, both `len` bytes of 0/1.
 *
 * # Safety
 * `pred` and `gt` must hold `len` bytes; `out` must be writable.
 */
enum GsStatus gs_metrics_compute(const uint8_t *pred,
                                 const uint8_t *gt,
                                 size_t len,
                                 double beta_sq,
                                 struct GsMetrics *out);

/**
 * Middle width of the channel-reduction block for `c_in → c_out`.
 *
 * # Safety
 * `out` must be writable.
 */
enum GsStatus gs_channel_mid(size_t c_in, size_t c_out, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLASS_SEG_H */
