#ifndef BIMSA_H
#define BIMSA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum BimsaStatus {
  BIMSA_STATUS_OK = 0,
  BIMSA_STATUS_NULL_POINTER = 1,
  BIMSA_STATUS_INVALID_ARGUMENT = 2,
  BIMSA_STATUS_IO = 3,
  BIMSA_STATUS_CHECKPOINT = 4,
  BIMSA_STATUS_CONFIG = 5,
  BIMSA_STATUS_CONTRACT = 6,
  BIMSA_STATUS_INTERNAL = 7,
  BIMSA_STATUS_PANIC = 8,
} BimsaStatus;

/**
 * Confusion-matrix accumulator.
 */
typedef struct BimsaConfusion BimsaConfusion;

/**
 * Trained or freshly initialized segmentation model.
 */
typedef struct BimsaModel BimsaModel;

/**
 * Overlapping tile layout for one image size.
 */
typedef struct BimsaTiling BimsaTiling;

/**
 * Tile rectangle in pixels.
 */
typedef struct BimsaRect {
  size_t y;
  size_t x;
  size_t height;
  size_t width;
} BimsaRect;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message (NUL-terminated, truncated to `len`) into
 * `buf` and returns the full message length excluding the terminator.
 * Pass a null `buf` to query the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t bimsa_last_error(char *buf, size_t len);

/**
 * Learning rate after `step` of `total` steps under the polynomial decay
 * `lr0 * (1 - step/total)^power`; zero past the end.
 */
double bimsa_poly_lr(size_t step, size_t total, double lr0, double power);

/**
 * Creates a model with the default configuration and the named fusion
 * strategy (`single`, `avg`, `max`, `msd-concat`, `hmsa-score`,
 * `fhmsa-feature` or `bimsa`).
 *
 * # Safety
 * `strategy` must be a NUL-terminated string; `out` must be writable.
 */
enum BimsaStatus bimsa_model_new(const char *strategy, uint64_t seed, struct BimsaModel **out);

/**
 * Loads a checkpoint written by `bimsa train` or [`bimsa_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum BimsaStatus bimsa_model_load(const char *path, struct BimsaModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum BimsaStatus bimsa_model_save(const struct BimsaModel *model, const char *path);

/**
 * Number of classes the model predicts; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bimsa_model_n_class(const struct BimsaModel *model);

/**
 * Tiled prediction of an interleaved 8-bit RGB image (`height * width * 3`
 * bytes, row-major). Writes `height * width` class indices to `labels` and,
 * if `scores` is non-null, `n_class * height * width` averaged logits in
 * channel-major order.
 *
 * # Safety
 * All buffers must be valid for the sizes above; `model` must be live.
 */
enum BimsaStatus bimsa_model_predict(const struct BimsaModel *model,
                                     const uint8_t *rgb,
                                     size_t height,
                                     size_t width,
                                     size_t tile,
                                     size_t overlap,
                                     uint8_t *labels,
                                     float *scores);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void bimsa_model_free(struct BimsaModel *model);

/**
 * Plans overlapping tiles for an image; `overlap` must be below `tile`.
 *
 * # Safety
 * `out` must be writable.
 */
enum BimsaStatus bimsa_tiling_new(size_t height,
                                  size_t width,
                                  size_t tile,
                                  size_t overlap,
                                  struct BimsaTiling **out);

/**
 * Number of tiles; 0 for a null handle.
 *
 * # Safety
 * `plan` must be null or live.
 */
size_t bimsa_tiling_len(const struct BimsaTiling *plan);

/**
 * Tile `index` in row-major order.
 *
 * # Safety
 * `plan` must be live; `out` writable.
 */
enum BimsaStatus bimsa_tiling_get(const struct BimsaTiling *plan,
                                  size_t index,
                                  struct BimsaRect *out);

/**
 * # Safety
 * `plan` must be null or a handle not yet freed.
 */
void bimsa_tiling_free(struct BimsaTiling *plan);

/**
 * # Safety
 * `out` must be writable.
 */
enum BimsaStatus bimsa_confusion_new(size_t n_class, struct BimsaConfusion **out);

/**
 * Adds `len` predicted/true label pairs; truth 255 is ignored.
 *
 * # Safety
 * `cm` must be live; `pred` and `truth` must hold `len` bytes each.
 */
enum BimsaStatus bimsa_confusion_accumulate(struct BimsaConfusion *cm,
                                            const uint8_t *pred,
                                            const uint8_t *truth,
                                            size_t len);

/**
 * Count of pixels with the given truth and predicted class.
 *
 * # Safety
 * `cm` must be live; `out` writable.
 */
enum BimsaStatus bimsa_confusion_get(const struct BimsaConfusion *cm,
                                     size_t truth,
                                     size_t pred,
                                     uint64_t *out);

/**
 * Mean IoU over classes present in truth or prediction. If `iou` is
 * non-null it receives `n_class` per-class values, NaN for absent classes.
 *
 * # Safety
 * `cm` must be live; `miou` writable; `iou` null or `n_class` floats.
 */
enum BimsaStatus bimsa_confusion_miou(const struct BimsaConfusion *cm, double *miou, double *iou);

/**
 * # Safety
 * `cm` must be null or a handle not yet freed.
 */
void bimsa_confusion_free(struct BimsaConfusion *cm);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BIMSA_H */
