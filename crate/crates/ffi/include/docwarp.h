#ifndef DOCWARP_H
#define DOCWARP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum DwStatus {
  DW_STATUS_OK = 0,
  DW_STATUS_NULL_POINTER = 1,
  DW_STATUS_INVALID_ARGUMENT = 2,
  DW_STATUS_IO = 3,
  DW_STATUS_PARSE = 4,
  DW_STATUS_INVALID_CONFIG = 5,
  DW_STATUS_INVALID_PLAN = 6,
  DW_STATUS_RASTER = 7,
  DW_STATUS_PANIC = 8,
} DwStatus;

/**
 * Augmentation settings.
 */
typedef struct DwConfig DwConfig;

/**
 * An 8-bit gray, RGB or RGBA raster.
 */
typedef struct DwImage DwImage;

/**
 * A sampled or deserialized transform plan.
 */
typedef struct DwPlan DwPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dw_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *dw_version(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void dw_string_free(char *s);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum DwStatus dw_config_default(struct DwConfig **out);

/**
 * Parses and validates a JSON config.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum DwStatus dw_config_from_json(const char *json, struct DwConfig **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum DwStatus dw_config_load(const char *path, struct DwConfig **out);

/**
 * # Safety
 * `cfg` must be a live config handle.
 */
enum DwStatus dw_config_set_seed(struct DwConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be a live config handle; `out` must be valid for writes.
 */
enum DwStatus dw_config_to_json(const struct DwConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be NULL or a config handle not yet freed.
 */
void dw_config_free(struct DwConfig *cfg);

/**
 * Copies `len` bytes of interleaved 8-bit samples into a new image.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be valid for writes.
 */
enum DwStatus dw_image_new(uint32_t width,
                           uint32_t height,
                           uint8_t channels,
                           const uint8_t *data,
                           size_t len,
                           struct DwImage **out);

/**
 * Decodes a PNG or JPEG file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum DwStatus dw_image_read(const char *path, struct DwImage **out);

/**
 * Encodes by file extension.
 *
 * # Safety
 * `img` must be a live image handle; `path` a NUL-terminated string.
 */
enum DwStatus dw_image_write(const struct DwImage *img, const char *path);

/**
 * Width, height and channel count; any out pointer may be NULL.
 *
 * # Safety
 * `img` must be a live image handle; non-NULL outs must be valid for writes.
 */
enum DwStatus dw_image_info(const struct DwImage *img,
                            uint32_t *width,
                            uint32_t *height,
                            uint8_t *channels);

/**
 * Borrows the pixel bytes, row-major and interleaved. The pointer is valid
 * while `img` lives.
 *
 * # Safety
 * `img` must be a live image handle; `data` and `len` valid for writes.
 */
enum DwStatus dw_image_data(const struct DwImage *img, const uint8_t **data, size_t *len);

/**
 * # Safety
 * `img` must be NULL or an image handle not yet freed.
 */
void dw_image_free(struct DwImage *img);

/**
 * Samples the plan for variant `variant` of page `stem`, exactly as batch
 * augmentation would.
 *
 * # Safety
 * `cfg` must be a live config handle, `stem` a NUL-terminated string and
 * `out` valid for writes.
 */
enum DwStatus dw_plan_sample(const struct DwConfig *cfg,
                             const char *stem,
                             uint32_t variant,
                             uint32_t width,
                             uint32_t height,
                             struct DwPlan **out);

/**
 * Parses a plan in the manifest's JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum DwStatus dw_plan_from_json(const char *json, struct DwPlan **out);

/**
 * # Safety
 * `plan` must be a live plan handle; `out` must be valid for writes.
 */
enum DwStatus dw_plan_to_json(const struct DwPlan *plan, char **out);

/**
 * Maps a source pixel location to the output frame.
 *
 * # Safety
 * `plan` must be a live plan handle; `out_x` and `out_y` valid for writes.
 */
enum DwStatus dw_plan_forward(const struct DwPlan *plan,
                              double x,
                              double y,
                              double *out_x,
                              double *out_y);

/**
 * Maps an output location back to the source. `converged` (may be NULL)
 * is false when the result misses `tol`.
 *
 * # Safety
 * `plan` must be a live plan handle; `out_x` and `out_y` valid for writes.
 */
enum DwStatus dw_plan_inverse(const struct DwPlan *plan,
                              double x,
                              double y,
                              uint32_t iters,
                              double tol,
                              double *out_x,
                              double *out_y,
                              bool *converged);

/**
 * # Safety
 * `plan` must be NULL or a plan handle not yet freed.
 */
void dw_plan_free(struct DwPlan *plan);

/**
 * Resamples `img` through `plan` with the config's fill and inverse
 * settings. `nonconverged` (may be NULL) receives the share of pixels whose
 * inverse missed its tolerance.
 *
 * # Safety
 * Handles must be live; `out` must be valid for writes.
 */
enum DwStatus dw_warp_image(const struct DwImage *img,
                            const struct DwPlan *plan,
                            const struct DwConfig *cfg,
                            struct DwImage **out,
                            double *nonconverged);

/**
 * Augments one annotated page: the warped image, the transformed LabelMe
 * JSON (kept shapes only) and the OBB text. `out_labelme` and `out_obb`
 * may be NULL when not wanted.
 *
 * # Safety
 * Handles must be live, `labelme_json` a NUL-terminated string; non-NULL
 * outs must be valid for writes.
 */
enum DwStatus dw_augment_labelme(const struct DwConfig *cfg,
                                 const struct DwPlan *plan,
                                 const struct DwImage *img,
                                 const char *labelme_json,
                                 struct DwImage **out_image,
                                 char **out_labelme,
                                 char **out_obb);

/**
 * IoU of two simple polygons given as `n` interleaved `x, y` pairs.
 *
 * # Safety
 * `a` and `b` must point to `2 * a_n` and `2 * b_n` doubles; `out` must be
 * valid for writes.
 */
enum DwStatus dw_polygon_iou(const double *a, size_t a_n, const double *b, size_t b_n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOCWARP_H */
