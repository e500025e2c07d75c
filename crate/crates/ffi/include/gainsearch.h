#ifndef GAINSEARCH_H
#define GAINSEARCH_H

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
  GS_STATUS_DIMENSION = 3,
  GS_STATUS_NUMERICAL = 4,
  GS_STATUS_MESH = 5,
  GS_STATUS_SOLVE = 6,
  GS_STATUS_IO = 7,
  GS_STATUS_PARSE = 8,
  GS_STATUS_PANIC = 9,
} GsStatus;

typedef enum GsMethod {
  GS_METHOD_KSG = 0,
  GS_METHOD_LSG = 1,
  GS_METHOD_GN = 2,
} GsMethod;

typedef struct GsConfig GsConfig;

typedef struct GsData GsData;

typedef struct GsModel GsModel;

typedef struct GsReconstruction GsReconstruction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *gs_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t gs_last_error_message(char *buf, size_t len);

/**
 * Built-in default configuration.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum GsStatus gs_config_default(struct GsConfig **out);

/**
 * Configuration parsed from TOML text; missing keys take their defaults.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum GsStatus gs_config_from_toml(const char *toml, struct GsConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, freed once.
 */
void gs_config_free(struct GsConfig *cfg);

/**
 * Builds the reconstruction mesh and forward model for `cfg`.
 *
 * # Safety
 * `cfg` must be a live config handle and `out` a valid handle slot.
 */
enum GsStatus gs_model_new(const struct GsConfig *cfg, struct GsModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, freed once.
 */
void gs_model_free(struct GsModel *model);

/**
 * Number of unknowns; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t gs_model_n_params(const struct GsModel *model);

/**
 * Number of measurements; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t gs_model_n_measurements(const struct GsModel *model);

/**
 * Evaluates the forward model at physical parameters `p` (cm^-2, one per
 * IR node) into `out`.
 *
 * # Safety
 * `p` must hold `n_params` values and `out` room for `n_measurements`.
 */
enum GsStatus gs_model_evaluate(const struct GsModel *model,
                                const double *p,
                                size_t n_params,
                                double *out,
                                size_t n_measurements);

/**
 * Synthetic measurements of the configured phantom on the finer data mesh.
 *
 * # Safety
 * `cfg` must be a live config handle and `out` a valid handle slot.
 */
enum GsStatus gs_data_synthesize(const struct GsConfig *cfg,
                                 double noise_frac,
                                 uint64_t seed,
                                 struct GsData **out);

/**
 * Reads a measurement CSV written by the command-line tool.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum GsStatus gs_data_read_csv(const char *path, struct GsData **out);

/**
 * Number of measurements; 0 for a null handle.
 *
 * # Safety
 * `data` must be null or a live data handle.
 */
size_t gs_data_len(const struct GsData *data);

/**
 * Copies the measurement values into `out`.
 *
 * # Safety
 * `out` must have room for `len` values.
 */
enum GsStatus gs_data_values(const struct GsData *data, double *out, size_t len);

/**
 * # Safety
 * `data` must be null or a handle from this library, freed once.
 */
void gs_data_free(struct GsData *data);

/**
 * Reconstructs p from `data` with the model's configuration.
 *
 * # Safety
 * Handles must be live and `out` a valid handle slot.
 */
enum GsStatus gs_reconstruct(const struct GsModel *model,
                             const struct GsData *data,
                             enum GsMethod method,
                             uint64_t seed,
                             struct GsReconstruction **out);

/**
 * Number of reconstructed values; 0 for a null handle.
 *
 * # Safety
 * `rec` must be null or a live reconstruction handle.
 */
size_t gs_reconstruction_len(const struct GsReconstruction *rec);

/**
 * Iterations performed; 0 for a null handle.
 *
 * # Safety
 * `rec` must be null or a live reconstruction handle.
 */
size_t gs_reconstruction_iterations(const struct GsReconstruction *rec);

/**
 * Copies the field (cm^-2) and, when `nodes` is non-null, the matching
 * global mesh node indices.
 *
 * # Safety
 * `values` and non-null `nodes` must have room for `len` entries.
 */
enum GsStatus gs_reconstruction_field(const struct GsReconstruction *rec,
                                      double *values,
                                      size_t *nodes,
                                      size_t len);

/**
 * # Safety
 * `rec` must be null or a handle from this library, freed once.
 */
void gs_reconstruction_free(struct GsReconstruction *rec);

/**
 * Kalman-type gain update of an ensemble. `predicted` is n_params x n_members,
 * `forward` is n_obs x n_members, `delta_m` the observation increment.
 * `out` receives the updated n_params x n_members ensemble and may alias
 * `predicted`.
 *
 * # Safety
 * Buffers must hold the sizes stated above.
 */
enum GsStatus gs_ksg_update(size_t n_params,
                            size_t n_members,
                            size_t n_obs,
                            const double *predicted,
                            const double *forward,
                            const double *delta_m,
                            double delta_tau,
                            double alpha,
                            double *out);

/**
 * Least-squares gain update towards the pseudo-measurement `m_next`, with
 * the same layout as [`gs_ksg_update`].
 *
 * # Safety
 * Buffers must hold the sizes stated for [`gs_ksg_update`].
 */
enum GsStatus gs_lsg_update(size_t n_params,
                            size_t n_members,
                            size_t n_obs,
                            const double *predicted,
                            const double *forward,
                            const double *m_next,
                            double sigma_eta,
                            double alpha,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAINSEARCH_H */
