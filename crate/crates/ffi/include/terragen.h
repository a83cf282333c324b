#ifndef TERRAGEN_H
#define TERRAGEN_H

#include <stddef.h>
#include <stdint.h>

typedef enum TgStatus {
  TG_STATUS_OK = 0,
  TG_STATUS_NULL_ARGUMENT = 1,
  TG_STATUS_INVALID_UTF8 = 2,
  TG_STATUS_IO = 3,
  TG_STATUS_CONFIG = 4,
  TG_STATUS_DATA = 5,
  TG_STATUS_NUMERICS = 6,
  TG_STATUS_LAYOUT = 7,
  TG_STATUS_DIVERGED = 8,
  TG_STATUS_BUFFER_TOO_SMALL = 9,
  TG_STATUS_PANIC = 10,
} TgStatus;

typedef struct TgLayout TgLayout;

/**
 * Trained model plus the noise schedule it was trained with.
 */
typedef struct TgModel TgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t tg_last_error_message(char *buf, size_t len);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
enum TgStatus tg_model_load(const char *path, struct TgModel **out);

/**
 * # Safety
 * `model` must come from `tg_model_load` and not be used afterwards.
 */
void tg_model_free(struct TgModel *model);

/**
 * Writes channels, height and width of generated images.
 *
 * # Safety
 * `model` must be a live handle; the outputs must be valid for writes.
 */
enum TgStatus tg_model_shape(const struct TgModel *model,
                             size_t *channels,
                             size_t *height,
                             size_t *width);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
enum TgStatus tg_layout_read(const char *path, struct TgLayout **out);

/**
 * # Safety
 * `layout` must come from `tg_layout_read` and not be used afterwards.
 */
void tg_layout_free(struct TgLayout *layout);

/**
 * # Safety
 * `layout` must be a live handle; `count` must be valid for a write.
 */
enum TgStatus tg_layout_entity_count(const struct TgLayout *layout, size_t *count);

/**
 * Number of validation issues (overlaps, broken roads, task conflicts).
 *
 * # Safety
 * `layout` must be a live handle; `issues` must be valid for a write.
 */
enum TgStatus tg_layout_validate(const struct TgLayout *layout, size_t *issues);

/**
 * Guided DDIM sample for `layout`, written as interleaved 8-bit pixels.
 * `len` must be at least channels·height·width.
 *
 * # Safety
 * Handles must be live; `pixels` must be valid for `len` bytes.
 */
enum TgStatus tg_sample(const struct TgModel *model,
                        const struct TgLayout *layout,
                        size_t ddim_steps,
                        double guidance_scale,
                        uint64_t seed,
                        uint8_t *pixels,
                        size_t len);

/**
 * Writes a synthetic corpus under `root` with the default config and the
 * given seed and split sizes; `records` receives the sample count.
 *
 * # Safety
 * `root` must be a NUL-terminated string; `records` null or valid for a write.
 */
enum TgStatus tg_generate_dataset(const char *root,
                                  uint64_t seed,
                                  size_t train,
                                  size_t val,
                                  size_t test,
                                  size_t *records);

/**
 * Fréchet distance between two Gaussians given as means (`dim`) and
 * row-major covariances (`dim`×`dim`).
 *
 * # Safety
 * Means must be valid for `dim` reads, covariances for `dim`·`dim`, `out` for a write.
 */
enum TgStatus tg_fid(const double *mean_real,
                     const double *cov_real,
                     const double *mean_gen,
                     const double *cov_gen,
                     size_t dim,
                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TERRAGEN_H */
