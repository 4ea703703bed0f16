#ifndef NRGAN_H
#define NRGAN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NrganStatus {
  NRGAN_STATUS_OK = 0,
  NRGAN_STATUS_NULL_POINTER = 1,
  NRGAN_STATUS_INVALID_ARGUMENT = 2,
  NRGAN_STATUS_SHAPE_MISMATCH = 3,
  NRGAN_STATUS_IO = 4,
  NRGAN_STATUS_CHECKPOINT = 5,
  NRGAN_STATUS_DIVERGED = 6,
  NRGAN_STATUS_INTERNAL = 7,
} NrganStatus;

/**
 * A trained denoiser loaded from a checkpoint.
 */
typedef struct NrganDenoiser NrganDenoiser;

/**
 * Clean-image and noise generators loaded from a checkpoint.
 */
typedef struct NrganGenerator NrganGenerator;

/**
 * A parsed noise specification.
 */
typedef struct NrganNoiseSpec NrganNoiseSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t nrgan_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nrgan_version(void);

/**
 * Parse a noise spec from flat `key = value` text (one entry per line, or
 * comma separated), e.g. `variant = A` / `sigma = 25`.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum NrganStatus nrgan_noise_spec_parse(const char *text, struct NrganNoiseSpec **out);

/**
 * # Safety
 * `spec` must be null or a handle from [`nrgan_noise_spec_parse`], freed once.
 */
void nrgan_noise_spec_free(struct NrganNoiseSpec *spec);

/**
 * Corrupt clean `[-1, 1]` images `x`; writes the noise and `y = x + n`.
 *
 * # Safety
 * `x`, `noise_out` and `y_out` must each hold `n*h*w*c` floats.
 */
enum NrganStatus nrgan_sample_noise(const struct NrganNoiseSpec *spec,
                                    const float *x,
                                    size_t n,
                                    size_t h,
                                    size_t w,
                                    size_t c,
                                    uint64_t seed,
                                    float *noise_out,
                                    float *y_out);

/**
 * Load a generator bundle (or a GAN training checkpoint).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NrganStatus nrgan_generator_load(const char *path, struct NrganGenerator **out);

/**
 * # Safety
 * `gen` must be null or a handle from [`nrgan_generator_load`], freed once.
 */
void nrgan_generator_free(struct NrganGenerator *gen);

/**
 * Side length and channel count of generated images.
 *
 * # Safety
 * `gen` must be a live handle; the outputs must be writable.
 */
enum NrganStatus nrgan_generator_dims(const struct NrganGenerator *gen,
                                      size_t *resolution,
                                      size_t *channels);

/**
 * Draw `n` EMA samples. `clean_out` receives the clean images;
 * `observed_out`, when not null, the composed observations (an error for
 * variants without a noise model).
 *
 * # Safety
 * Each non-null buffer must hold `n * resolution^2 * channels` floats.
 */
enum NrganStatus nrgan_generator_sample(const struct NrganGenerator *gen,
                                        size_t n,
                                        uint64_t seed,
                                        float *clean_out,
                                        float *observed_out);

/**
 * Load a trained denoiser.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NrganStatus nrgan_denoiser_load(const char *path, struct NrganDenoiser **out);

/**
 * # Safety
 * `d` must be null or a handle from [`nrgan_denoiser_load`], freed once.
 */
void nrgan_denoiser_free(struct NrganDenoiser *d);

/**
 * Denoise `[-0.5, 0.5]` images of any size.
 *
 * # Safety
 * `y` and `out` must each hold `n*h*w*c` floats.
 */
enum NrganStatus nrgan_denoiser_apply(const struct NrganDenoiser *d,
                                      const float *y,
                                      size_t n,
                                      size_t h,
                                      size_t w,
                                      size_t c,
                                      float *out);

/**
 * PSNR in dB between two buffers of `len` values; `+inf` when identical.
 *
 * # Safety
 * `reference` and `estimate` must hold `len` floats; `out` must be writable.
 */
enum NrganStatus nrgan_psnr(const float *reference,
                            const float *estimate,
                            size_t len,
                            double peak,
                            double *out);

/**
 * Frechet distance between two Gaussians given by means (`d`) and
 * row-major covariances (`d*d`).
 *
 * # Safety
 * Means must hold `d` doubles, covariances `d*d`; `out` must be writable.
 */
enum NrganStatus nrgan_frechet_distance(const double *mean_a,
                                        const double *cov_a,
                                        const double *mean_b,
                                        const double *cov_b,
                                        size_t d,
                                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NRGAN_H */
