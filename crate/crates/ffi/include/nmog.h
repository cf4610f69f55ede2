#ifndef NMOG_H
#define NMOG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum NmogStatus {
  NMOG_STATUS_OK = 0,
  NMOG_STATUS_NULL_POINTER = 1,
  NMOG_STATUS_INVALID_ARGUMENT = 2,
  NMOG_STATUS_IO = 3,
  NMOG_STATUS_FORMAT = 4,
  // Inference hit a non-finite state. Outputs still hold the last finite
  // state.
  NMOG_STATUS_DIVERGED = 5,
  NMOG_STATUS_PANIC = 6,
} NmogStatus;

// Opaque hyperspectral cube.
typedef struct NmogCube NmogCube;

// Opaque inference report.
typedef struct NmogReport NmogReport;

// Inference settings. Fill with [`nmog_config_default`] before editing.
typedef struct NmogConfig {
  uint32_t rank;
  uint32_t components;
  uint32_t max_iters;
  double tol;
  double prune_ratio;
  uint64_t seed;
  bool normalize;
  bool elbo_check;
  bool free_noise_mean;
} NmogConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread, or null. Valid until the
// next failing call on the same thread.
const char *nmog_last_error(void);

// Library version as a static NUL-terminated string.
const char *nmog_version(void);

// Writes the default settings to `out`.
//
// # Safety
// `out` must be null or point to writable memory for one `NmogConfig`.
enum NmogStatus nmog_config_default(struct NmogConfig *out);

// Copies `rows * cols * bands` floats (band-major, row-major within band)
// into a new cube.
//
// # Safety
// `data` must point to that many readable floats; `out` must be writable.
enum NmogStatus nmog_cube_new(size_t rows,
                              size_t cols,
                              size_t bands,
                              const float *data,
                              struct NmogCube **out);

// Reads a cube file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum NmogStatus nmog_cube_load(const char *path, struct NmogCube **out);

// Writes a cube file.
//
// # Safety
// `cube` must be a live handle and `path` a NUL-terminated string.
enum NmogStatus nmog_cube_save(const struct NmogCube *cube, const char *path);

// Reports the cube shape. Any output pointer may be null.
//
// # Safety
// `cube` must be a live handle; non-null outputs must be writable.
enum NmogStatus nmog_cube_dims(const struct NmogCube *cube,
                               size_t *rows,
                               size_t *cols,
                               size_t *bands);

// Borrowed pointer to the cube's samples, valid until the cube is freed.
// Null when `cube` is null.
//
// # Safety
// `cube` must be null or a live handle.
const float *nmog_cube_data(const struct NmogCube *cube);

// Releases a cube. Null is ignored.
//
// # Safety
// `cube` must be null or a handle not yet freed.
void nmog_cube_free(struct NmogCube *cube);

// Corrupts `clean` with a named noise case (`iid`, `noniid`, `stripe`,
// `deadline`, `impulse`, `mixture`). When `metadata_json` is non-null it
// receives a string to release with [`nmog_string_free`].
//
// # Safety
// `clean` must be a live handle, `case_name` NUL-terminated, `out` writable.
enum NmogStatus nmog_simulate(const struct NmogCube *clean,
                              const char *case_name,
                              uint64_t seed,
                              struct NmogCube **out,
                              char **metadata_json);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a string from this library not yet freed.
void nmog_string_free(char *s);

// Denoises `noisy`. On [`NmogStatus::Diverged`] both outputs are still set
// from the last finite state. `report` may be null.
//
// # Safety
// `noisy` must be a live handle, `config` readable, `out` writable, and
// `report` null or writable.
enum NmogStatus nmog_denoise(const struct NmogCube *noisy,
                             const struct NmogConfig *config,
                             struct NmogCube **out,
                             struct NmogReport **report);

// Rank-`rank` truncated-SVD restoration clipped to [0, 1].
//
// # Safety
// `cube` must be a live handle and `out` writable.
enum NmogStatus nmog_svd_baseline(const struct NmogCube *cube, size_t rank, struct NmogCube **out);

// Mean PSNR (dB, peak 1) and mean SSIM of `test` against `reference`.
//
// # Safety
// Both cubes must be live handles; outputs must be writable or null.
enum NmogStatus nmog_evaluate(const struct NmogCube *reference,
                              const struct NmogCube *test,
                              double *mpsnr,
                              double *mssim);

// Report as JSON, owned by the report. Null when `report` is null.
//
// # Safety
// `report` must be null or a live handle.
const char *nmog_report_json(const struct NmogReport *report);

// Active rank at the end of the run, or 0 for a null report.
//
// # Safety
// `report` must be null or a live handle.
size_t nmog_report_final_rank(const struct NmogReport *report);

// Iterations run, or 0 for a null report.
//
// # Safety
// `report` must be null or a live handle.
size_t nmog_report_iterations(const struct NmogReport *report);

// Releases a report. Null is ignored.
//
// # Safety
// `report` must be null or a handle not yet freed.
void nmog_report_free(struct NmogReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NMOG_H */
