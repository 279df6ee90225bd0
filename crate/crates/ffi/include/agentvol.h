#ifndef AGENTVOL_H
#define AGENTVOL_H

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum AvStatus {
  AV_STATUS_OK = 0,
  AV_STATUS_NULL_POINTER = 1,
  AV_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Malformed JSON or CSV input, or invalid UTF-8.
   */
  AV_STATUS_PARSE = 3,
  AV_STATUS_IO = 4,
  /**
   * Spectral radius of the branching matrix is at least one.
   */
  AV_STATUS_UNSTABLE = 5,
  AV_STATUS_MODEL = 6,
  AV_STATUS_SIMULATION = 7,
  AV_STATUS_ESTIMATION = 8,
  /**
   * Too few events to fit the requested agent.
   */
  AV_STATUS_INSUFFICIENT_EVENTS = 9,
  /**
   * A Rust panic was caught at the boundary.
   */
  AV_STATUS_INTERNAL = 10,
} AvStatus;

/**
 * Opaque multivariate Hawkes model.
 */
typedef struct AvModel AvModel;

/**
 * Opaque labelled event stream.
 */
typedef struct AvStream AvStream;

/**
 * Estimation settings for [`av_fit_agent_json`].
 */
typedef struct AvFitOptions {
  /**
   * Exponential decay rates, `n_decays` values.
   */
  const double *decays;
  size_t n_decays;
  size_t baseline_bins;
  size_t min_events;
  /**
   * Relative ridge on the normalised Gram matrix.
   */
  double ridge;
} AvFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *av_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *av_version(void);

/**
 * Parses a model from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum AvStatus av_model_from_json(const char *json, struct AvModel **out);

/**
 * Single agent on price moves only: baseline `mu`, self-excitation `phi_s`,
 * cross-excitation `phi_c`, one exponential of rate `decay`.
 *
 * # Safety
 * `out` must be writable.
 */
enum AvStatus av_model_toy(double mu,
                           double phi_s,
                           double phi_c,
                           double decay,
                           double horizon,
                           struct AvModel **out);

/**
 * Serialises a model to JSON; release the result with [`av_string_free`].
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum AvStatus av_model_to_json(const struct AvModel *model, char **out);

/**
 * Number of components. Returns 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t av_model_dim(const struct AvModel *model);

/**
 * Spectral radius of the integrated kernel matrix.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum AvStatus av_model_spectral_radius(const struct AvModel *model, double *out);

/**
 * Row-major `dim * dim` branching matrix `(I - Phi)^-1` written into `buf`,
 * which must hold `len >= dim * dim` values.
 *
 * # Safety
 * `model` must come from this library; `buf` must hold `len` doubles.
 */
enum AvStatus av_model_branching(const struct AvModel *model, double *buf, size_t len);

/**
 * Long-run price variance per unit time, in squared jump units.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum AvStatus av_model_sigma2(const struct AvModel *model, double *out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or an unreleased handle from this library.
 */
void av_model_free(struct AvModel *model);

/**
 * Simulates `model` over `[0, horizon)` by thinning.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum AvStatus av_simulate(const struct AvModel *model,
                          double horizon,
                          uint64_t seed,
                          struct AvStream **out);

/**
 * Reads a classified events CSV, keeping events inside `[open, close)`
 * seconds after midnight.
 *
 * # Safety
 * `path` and `day` must be NUL-terminated strings; `out` must be writable.
 */
enum AvStatus av_stream_from_csv(const char *path,
                                 const char *day,
                                 double open,
                                 double close,
                                 struct AvStream **out);

/**
 * Number of events. Returns 0 for a null handle.
 *
 * # Safety
 * `stream` must be null or come from this library.
 */
size_t av_stream_len(const struct AvStream *stream);

/**
 * Number of events of `agent`. Returns 0 for a null handle.
 *
 * # Safety
 * `stream` must be null or come from this library.
 */
size_t av_stream_agent_events(const struct AvStream *stream, uint32_t agent);

/**
 * Realized variance of the mid-price path sampled every `tau` seconds.
 *
 * # Safety
 * `stream` must come from this library; `out` must be writable.
 */
enum AvStatus av_stream_realized_variance(const struct AvStream *stream, double tau, double *out);

/**
 * Releases a stream. Null is ignored.
 *
 * # Safety
 * `stream` must be null or an unreleased handle from this library.
 */
void av_stream_free(struct AvStream *stream);

/**
 * Fits `agent` against the rest of the market and returns the fit as JSON.
 * Release the result with [`av_string_free`].
 *
 * # Safety
 * `stream` must come from this library; `opts.decays` must hold
 * `opts.n_decays` values; `out` must be writable.
 */
enum AvStatus av_fit_agent_json(const struct AvStream *stream,
                                uint32_t agent,
                                const struct AvFitOptions *opts,
                                char **out);

/**
 * Fits `agent` against the rest of the market and writes the integrated
 * self kernels as a row-major 8 x 8 matrix (target type by source type).
 *
 * # Safety
 * As [`av_fit_agent_json`]; `self_phi` must hold 64 doubles.
 */
enum AvStatus av_fit_agent_self_phi(const struct AvStream *stream,
                                    uint32_t agent,
                                    const struct AvFitOptions *opts,
                                    double *self_phi);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or an unreleased string from this library.
 */
void av_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AGENTVOL_H */
