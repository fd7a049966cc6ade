#ifndef AUD_H
#define AUD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum AudStatus {
  AUD_STATUS_OK = 0,
  AUD_STATUS_NULL_POINTER = 1,
  AUD_STATUS_INVALID_ARGUMENT = 2,
  AUD_STATUS_SHAPE = 3,
  AUD_STATUS_NON_FINITE = 4,
  AUD_STATUS_IO = 5,
  AUD_STATUS_PARSE = 6,
  AUD_STATUS_AUDIO = 7,
  AUD_STATUS_CHECKPOINT = 8,
  AUD_STATUS_CONFIG = 9,
  AUD_STATUS_STAGE = 10,
  AUD_STATUS_DIVERGED = 11,
  AUD_STATUS_PANIC = 12,
} AudStatus;

// Feature front end for [`aud_features_from_wav`].
typedef enum AudFeatureKind {
  // 80-band log-mel, not normalized.
  AUD_FEATURE_KIND_CONVERSION = 0,
  // 40-band log-mel with deltas and delta-deltas, per-utterance normalized.
  AUD_FEATURE_KIND_UNIT_DISCOVERY = 1,
} AudFeatureKind;

// A configured experiment bound to its run directory.
typedef struct AudExperiment AudExperiment;

// A feature matrix (frames x width).
typedef struct AudFeatures AudFeatures;

// A trained HMM-VAE.
typedef struct AudHmmVae AudHmmVae;

// Boundary precision, recall and F-score.
typedef struct AudBoundaryScore {
  double precision;
  double recall;
  double fscore;
  size_t matches;
  size_t hyp_count;
  size_t ref_count;
} AudBoundaryScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL after a
// successful one. Valid until the next call into this library on the
// same thread.
const char *aud_last_error(void);

// Normalized mutual information in percent of a `rows x cols` confusion
// matrix (rows: reference labels, columns: hypothesis units).
//
// # Safety
// `counts` must point to `rows * cols` values; `out` must be writable.
enum AudStatus aud_nmi(const uint64_t *counts, size_t rows, size_t cols, double *out);

// Cluster purity in [0, 1] of a `rows x cols` confusion matrix.
//
// # Safety
// `counts` must point to `rows * cols` values; `out` must be writable.
enum AudStatus aud_cluster_purity(const uint64_t *counts, size_t rows, size_t cols, double *out);

// Boundary scores of one utterance. Times are in seconds, strictly
// increasing, and exclude the utterance edges.
//
// # Safety
// `hyp` and `reference` must point to `hyp_len` and `ref_len` values;
// `out` must be writable.
enum AudStatus aud_boundary_fscore(const double *hyp,
                                   size_t hyp_len,
                                   const double *reference,
                                   size_t ref_len,
                                   double collar,
                                   struct AudBoundaryScore *out);

// Most likely state path through a trellis of log scores.
//
// # Safety
// `log_initial` holds `states` values, `log_transitions` `states * states`
// (row: from, column: to), `emissions` `frames * states`; `path_out` must
// have room for `frames` entries and `log_prob_out` must be writable.
enum AudStatus aud_viterbi(const double *log_initial,
                           const double *log_transitions,
                           const double *emissions,
                           size_t frames,
                           size_t states,
                           size_t *path_out,
                           double *log_prob_out);

// Computes features of a WAV file (any rate; resampled to 16 kHz).
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
enum AudStatus aud_features_from_wav(const char *path,
                                     enum AudFeatureKind kind,
                                     struct AudFeatures **out);

// Number of frames, or 0 for NULL.
//
// # Safety
// `features` must be NULL or a live handle.
size_t aud_features_frames(const struct AudFeatures *features);

// Values per frame, or 0 for NULL.
//
// # Safety
// `features` must be NULL or a live handle.
size_t aud_features_width(const struct AudFeatures *features);

// Row-major `frames x width` values, owned by the handle.
//
// # Safety
// `features` must be NULL or a live handle.
const double *aud_features_data(const struct AudFeatures *features);

// # Safety
// `features` must be NULL or a handle not freed before.
void aud_features_free(struct AudFeatures *features);

// Loads an HMM-VAE model or trainer checkpoint.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
enum AudStatus aud_hmmvae_load(const char *path, struct AudHmmVae **out);

// Feature width the model expects, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t aud_hmmvae_feature_dim(const struct AudHmmVae *model);

// Number of acoustic units, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t aud_hmmvae_units(const struct AudHmmVae *model);

// Unit label of every frame of one utterance's features.
//
// # Safety
// `model` must be a live handle, `features` must point to
// `frames * width` values and `units_out` must have room for `frames`
// entries.
enum AudStatus aud_hmmvae_decode(const struct AudHmmVae *model,
                                 const double *features,
                                 size_t frames,
                                 size_t width,
                                 size_t *units_out);

// # Safety
// `model` must be NULL or a handle not freed before.
void aud_hmmvae_free(struct AudHmmVae *model);

// Loads and validates an experiment configuration file.
//
// # Safety
// `config_path` must be a NUL-terminated UTF-8 string; `out` must be
// writable.
enum AudStatus aud_experiment_load(const char *config_path, struct AudExperiment **out);

// Runs every stage and writes the report. With `resume` false an existing
// run directory is refused.
//
// # Safety
// `experiment` must be a live handle.
enum AudStatus aud_experiment_run(const struct AudExperiment *experiment, bool resume);

// # Safety
// `experiment` must be NULL or a handle not freed before.
void aud_experiment_free(struct AudExperiment *experiment);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUD_H */
