#ifndef HFR_H
#define HFR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HfrStatus {
  HFR_STATUS_OK = 0,
  HFR_STATUS_NULL_POINTER = 1,
  HFR_STATUS_INVALID_UTF8 = 2,
  HFR_STATUS_PARSE_ERROR = 3,
  HFR_STATUS_INVALID_ARGUMENT = 4,
  HFR_STATUS_INVALID_MANIFEST = 5,
  HFR_STATUS_INFEASIBLE = 6,
  HFR_STATUS_NO_DATA = 7,
  HFR_STATUS_PANIC = 99,
} HfrStatus;

/**
 * Parsed study manifest.
 */
typedef struct HfrManifest HfrManifest;

/**
 * Parsed results CSV.
 */
typedef struct HfrResults HfrResults;

/**
 * Point estimate and confidence bounds, all in percent.
 */
typedef struct HfrEstimate {
  double estimate_pct;
  uint64_t n;
  double ci_low_pct;
  double ci_high_pct;
} HfrEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *hfr_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void hfr_string_free(char *s);

/**
 * Normal-approximation interval for a percentage estimate over `n`
 * responses, clipped to [0, 100].
 *
 * # Safety
 * `low` and `high` must be valid for writes.
 */
enum HfrStatus hfr_wald_ci(double estimate_pct,
                           uint64_t n,
                           double confidence,
                           double *low,
                           double *high);

/**
 * Wilson score interval; same contract as [`hfr_wald_ci`].
 *
 * # Safety
 * `low` and `high` must be valid for writes.
 */
enum HfrStatus hfr_wilson_ci(double estimate_pct,
                             uint64_t n,
                             double confidence,
                             double *low,
                             double *high);

/**
 * Parses a manifest document. Parsing does not validate; see
 * [`hfr_manifest_validate`].
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum HfrStatus hfr_manifest_parse(const char *json, struct HfrManifest **out);

/**
 * # Safety
 * `manifest` must come from [`hfr_manifest_parse`] and not have been freed.
 */
void hfr_manifest_free(struct HfrManifest *manifest);

/**
 * Writes the violation report (one `SEVERITY\tcode\tcontext` line per
 * violation) to `report_out` and whether the manifest has no errors to
 * `valid_out`.
 *
 * # Safety
 * `manifest` must be a live handle; both outputs must be valid for writes.
 */
enum HfrStatus hfr_manifest_validate(const struct HfrManifest *manifest,
                                     char **report_out,
                                     bool *valid_out);

/**
 * Builds the trial schedule and writes it as a JSON document.
 *
 * # Safety
 * `manifest` must be a live handle; `json_out` must be valid for writes.
 */
enum HfrStatus hfr_schedule_build(const struct HfrManifest *manifest,
                                  size_t pool,
                                  uint64_t seed,
                                  char **json_out);

/**
 * Parses a results CSV, checking its header.
 *
 * # Safety
 * `csv` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum HfrStatus hfr_results_from_csv(const char *csv, struct HfrResults **out);

/**
 * # Safety
 * `results` must come from [`hfr_results_from_csv`] and not have been freed.
 */
void hfr_results_free(struct HfrResults *results);

/**
 * Number of CSV rows; 0 for a null handle.
 *
 * # Safety
 * `results` must be null or a live handle.
 */
size_t hfr_results_len(const struct HfrResults *results);

/**
 * Fooling rate with a Wald interval over admissible rows, optionally
 * restricted to one system (`system` may be null).
 *
 * # Safety
 * `results` must be a live handle, `system` null or NUL-terminated, and
 * `out` valid for writes.
 */
enum HfrStatus hfr_results_hfr(const struct HfrResults *results,
                               const char *system,
                               double confidence,
                               struct HfrEstimate *out);

/**
 * Eight-character completion code for a rater.
 *
 * # Safety
 * `key` must point to `key_len` readable bytes; `study_id` and `rater_id`
 * must be NUL-terminated; `code_out` must be valid for writes.
 */
enum HfrStatus hfr_completion_code(const uint8_t *key,
                                   size_t key_len,
                                   const char *study_id,
                                   const char *rater_id,
                                   char **code_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HFR_H */
