#ifndef HEIGHTPIPE_H
#define HEIGHTPIPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum HpStatus {
  HP_STATUS_OK = 0,
  HP_STATUS_NULL_POINTER = 1,
  HP_STATUS_INVALID_ARGUMENT = 2,
  HP_STATUS_SHAPE_MISMATCH = 3,
  HP_STATUS_IO = 4,
  HP_STATUS_FORMAT = 5,
  HP_STATUS_COVERAGE_GAP = 6,
  HP_STATUS_INTERNAL = 7,
  HP_STATUS_PANIC = 8,
} HpStatus;

// Owned raster grid: row-major, channels interleaved.
typedef struct HpRaster HpRaster;

typedef struct HpHeightMetrics {
  double mse;
  double mae;
  double rmse;
} HpHeightMetrics;

typedef struct HpSemanticMetrics {
  double oa;
  double aa;
  double kappa;
} HpSemanticMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread. Empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *hp_last_error(void);

// Copies `height * width * channels` floats into a new raster.
//
// # Safety
// `data` must point to that many readable floats; `out` must be writable.
enum HpStatus hp_raster_new(size_t height,
                            size_t width,
                            size_t channels,
                            float gsd_m,
                            const float *data,
                            struct HpRaster **out);

// # Safety
// `raster` must be null or a handle from this library that was not freed yet.
void hp_raster_free(struct HpRaster *raster);

// # Safety
// `raster` must be a live handle; the out pointers must be writable.
enum HpStatus hp_raster_shape(const struct HpRaster *raster,
                              size_t *height,
                              size_t *width,
                              size_t *channels,
                              float *gsd_m);

// Borrowed pointer to the raster's values, valid while the handle lives.
// Null for a null handle.
//
// # Safety
// `raster` must be null or a live handle.
const float *hp_raster_data(const struct HpRaster *raster);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum HpStatus hp_hmap_read_raster(const char *path, struct HpRaster **out);

// # Safety
// `raster` must be a live handle and `path` a NUL-terminated string.
enum HpStatus hp_hmap_write_raster(const struct HpRaster *raster, const char *path);

// Reads a label HMAP into `labels` (`capacity` entries), storing its shape.
//
// # Safety
// `path` must be NUL-terminated; `labels` must have room for `capacity`
// values; the out pointers must be writable.
enum HpStatus hp_hmap_read_labels(const char *path,
                                  size_t num_classes,
                                  uint16_t *labels,
                                  size_t capacity,
                                  size_t *height,
                                  size_t *width);

// # Safety
// `labels` must hold `height * width` values; `path` must be NUL-terminated.
enum HpStatus hp_hmap_write_labels(const uint16_t *labels,
                                   size_t height,
                                   size_t width,
                                   size_t num_classes,
                                   float gsd_m,
                                   const char *path);

// Encoded surface normals of a single-channel height raster. `encoding` is
// 0 for `n/2 + 1` and 1 for `(n + 1)/2`.
//
// # Safety
// `height` must be a live handle; `out` must be writable.
enum HpStatus hp_surface_normals(const struct HpRaster *height,
                                 uint32_t encoding,
                                 bool metric_gradient,
                                 struct HpRaster **out);

// Square Gaussian blending window peaking at 1.
//
// # Safety
// `out` must be writable.
enum HpStatus hp_gaussian_window(size_t size, double sigma_px, struct HpRaster **out);

// Weighted blend of `count` crops placed at `rows[i], cols[i]` into an
// `out_height x out_width` raster. Fails with `CoverageGap` if any pixel is
// left uncovered.
//
// # Safety
// `crops`, `rows` and `cols` must each hold `count` entries of live
// handles / indices; `weights` must be a live handle; `out` writable.
enum HpStatus hp_stitch(const struct HpRaster *const *crops,
                        const size_t *rows,
                        const size_t *cols,
                        size_t count,
                        const struct HpRaster *weights,
                        size_t out_height,
                        size_t out_width,
                        struct HpRaster **out);

// # Safety
// Both handles must be live; `out` writable.
enum HpStatus hp_height_metrics(const struct HpRaster *pred,
                                const struct HpRaster *truth,
                                struct HpHeightMetrics *out);

// # Safety
// `pred` and `truth` must hold `count` labels; `out` writable.
enum HpStatus hp_semantic_metrics(const uint16_t *pred,
                                  const uint16_t *truth,
                                  size_t count,
                                  size_t num_classes,
                                  struct HpSemanticMetrics *out);

// Procedural city tile with default generator settings. Labels go to a
// caller buffer of `size * size` entries.
//
// # Safety
// `labels` must have room for `size * size` values; `rgb` and `height` writable.
enum HpStatus hp_synth_city(uint64_t seed,
                            size_t size,
                            size_t num_classes,
                            struct HpRaster **rgb,
                            struct HpRaster **height,
                            uint16_t *labels);

// One point per pixel, optionally colored by a 3-channel `rgb` raster (may be null).
//
// # Safety
// `height` must be live, `rgb` null or live, `path` NUL-terminated.
enum HpStatus hp_write_cloud_ply(const struct HpRaster *height,
                                 const struct HpRaster *rgb,
                                 const char *path,
                                 bool binary);

// Two triangles per pixel quad with Sobel vertex normals.
//
// # Safety
// `height` must be live, `rgb` null or live, `path` NUL-terminated.
enum HpStatus hp_write_mesh_ply(const struct HpRaster *height,
                                const struct HpRaster *rgb,
                                const char *path,
                                bool binary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEIGHTPIPE_H */
