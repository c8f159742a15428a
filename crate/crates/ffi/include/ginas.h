#ifndef GINAS_H
#define GINAS_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GinasStatus {
  GINAS_STATUS_OK = 0,
  GINAS_STATUS_NULL_POINTER = 1,
  GINAS_STATUS_INVALID_ARGUMENT = 2,
  GINAS_STATUS_UTF8 = 3,
  GINAS_STATUS_IO = 4,
  GINAS_STATUS_ATTACK_FAILED = 5,
  GINAS_STATUS_PANIC = 6,
} GinasStatus;

/**
 * Experiment configuration handle.
 */
typedef struct GinasConfig GinasConfig;

/**
 * Result of one attack run.
 */
typedef struct GinasReport GinasReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after a
 * success. Valid until the next call on this thread.
 */
const char *ginas_last_error_message(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer returned by this library, released once.
 */
void ginas_string_free(char *s);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GinasStatus ginas_config_default(struct GinasConfig **out);

/**
 * Parses a TOML configuration (a saved report is accepted as well).
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GinasStatus ginas_config_from_toml(const char *text, struct GinasConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, freed once.
 */
void ginas_config_free(struct GinasConfig *cfg);

/**
 * # Safety
 * `cfg` must be a valid handle.
 */
enum GinasStatus ginas_config_set_seed(struct GinasConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be a valid handle.
 */
enum GinasStatus ginas_config_set_candidates(struct GinasConfig *cfg, size_t n);

/**
 * # Safety
 * `cfg` must be a valid handle.
 */
enum GinasStatus ginas_config_set_iterations(struct GinasConfig *cfg, size_t iterations);

/**
 * `mode` is `full`, `upsample_only`, `connection_only` or `fixed_genome`.
 *
 * # Safety
 * `cfg` must be a valid handle and `mode` a NUL-terminated string.
 */
enum GinasStatus ginas_config_set_mode(struct GinasConfig *cfg, const char *mode);

/**
 * `spec` uses the command-line syntax, e.g. `clip:4` or `noise:0.1`.
 *
 * # Safety
 * `cfg` must be a valid handle and `spec` a NUL-terminated string.
 */
enum GinasStatus ginas_config_set_defense(struct GinasConfig *cfg, const char *spec);

/**
 * Serializes the configuration as TOML.
 *
 * # Safety
 * `cfg` must be a valid handle and `out` a valid pointer.
 */
enum GinasStatus ginas_config_to_toml(const struct GinasConfig *cfg, char **out);

/**
 * Runs the attack. A report is produced even when a stage fails; the
 * status is then `AttackFailed` and the message names the stage.
 *
 * # Safety
 * `cfg` must be a valid handle and `out` a valid pointer.
 */
enum GinasStatus ginas_run_attack(const struct GinasConfig *cfg, struct GinasReport **out);

/**
 * # Safety
 * `report` must be null or a handle from this library, freed once.
 */
void ginas_report_free(struct GinasReport *report);

/**
 * # Safety
 * `report` must be a valid handle and `out` a valid pointer.
 */
enum GinasStatus ginas_report_mean_psnr(const struct GinasReport *report, double *out);

/**
 * # Safety
 * `report` must be a valid handle and `out` a valid pointer.
 */
enum GinasStatus ginas_report_selected_index(const struct GinasReport *report, size_t *out);

/**
 * # Safety
 * `report` must be a valid handle and `out` a valid pointer.
 */
enum GinasStatus ginas_report_candidate_count(const struct GinasReport *report, size_t *out);

/**
 * Initial matching loss of candidate `index`.
 *
 * # Safety
 * `report` must be a valid handle and `out` a valid pointer.
 */
enum GinasStatus ginas_report_candidate_loss(const struct GinasReport *report,
                                             size_t index,
                                             double *out);

/**
 * The report as TOML.
 *
 * # Safety
 * `report` must be a valid handle and `out` a valid pointer.
 */
enum GinasStatus ginas_report_to_toml(const struct GinasReport *report, char **out);

/**
 * Writes the report, CSV tables and images into `dir`.
 *
 * # Safety
 * `report` must be a valid handle and `dir` a NUL-terminated string.
 */
enum GinasStatus ginas_report_persist(struct GinasReport *report, const char *dir);

/**
 * PSNR in dB of two equally long buffers with values in `[0, 1]`.
 *
 * # Safety
 * `a` and `b` must point to `len` values; `out` must be valid.
 */
enum GinasStatus ginas_psnr(const double *a, const double *b, size_t len, double *out);

/**
 * SSIM of two planar `channels x height x width` images.
 *
 * # Safety
 * `a` and `b` must point to `channels * height * width` values; `out`
 * must be valid.
 */
enum GinasStatus ginas_ssim(const double *a,
                            const double *b,
                            size_t channels,
                            size_t height,
                            size_t width,
                            double *out);

/**
 * Applies a defense to a flat gradient buffer. `spec` uses the
 * command-line syntax; `seed` drives the noise.
 *
 * # Safety
 * `grad` and `out` must point to `len` values; `spec` must be a
 * NUL-terminated string.
 */
enum GinasStatus ginas_apply_defense(const double *grad,
                                     size_t len,
                                     const char *spec,
                                     uint64_t seed,
                                     double *out);

/**
 * Tie-adjusted Kendall rank correlation of two buffers.
 *
 * # Safety
 * `a` and `b` must point to `len` values; `out` must be valid.
 */
enum GinasStatus ginas_kendall_tau(const double *a, const double *b, size_t len, double *out);

/**
 * Samples a genome over the default widths and returns its text record.
 * `mode` is `full`, `upsample_only` or `connection_only`.
 *
 * # Safety
 * `mode` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GinasStatus ginas_genome_sample(uint64_t seed, const char *mode, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GINAS_H */
