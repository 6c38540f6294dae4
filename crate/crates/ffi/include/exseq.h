#ifndef EXSEQ_H
#define EXSEQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ExseqStatus {
  EXSEQ_STATUS_OK = 0,
  EXSEQ_STATUS_NULL_POINTER = 1,
  EXSEQ_STATUS_INVALID_ARGUMENT = 2,
  EXSEQ_STATUS_DIMENSION_MISMATCH = 3,
  EXSEQ_STATUS_NUMERICAL = 4,
  EXSEQ_STATUS_IO = 5,
  EXSEQ_STATUS_CHECKPOINT = 6,
  EXSEQ_STATUS_PANIC = 7,
} ExseqStatus;

// Opaque sequence model holding its conditioning history.
typedef struct ExseqModel ExseqModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *exseq_version(void);

// Message of the last failed call on this thread ("" after a success).
// Valid until the next exseq call on the same thread.
const char *exseq_last_error_message(void);

// Closed-form one-step vs multi-step gap of the conjugate Gaussian model.
enum ExseqStatus exseq_gap_closed_form(double sigma,
                                       double tau,
                                       size_t t,
                                       size_t big_t,
                                       double *result);

// Conjugate Gaussian model: mean ~ N(mu0, sigma0²), y | mean ~ N(mean, tau²).
enum ExseqStatus exseq_model_conjugate_new(double mu0,
                                           double sigma0,
                                           double tau,
                                           struct ExseqModel **handle);

// Gaussian process with an RBF kernel on `dim`-dimensional inputs.
enum ExseqStatus exseq_model_gp_new(double signal_std,
                                    double lengthscale,
                                    double noise_std,
                                    size_t dim,
                                    struct ExseqModel **handle);

// Transformer from a checkpoint file. `mask` is "causal" or "cperm".
enum ExseqStatus exseq_model_transformer_load(const char *path,
                                              const char *mask,
                                              struct ExseqModel **handle);

// Releases a model; null is ignored.
void exseq_model_free(struct ExseqModel *handle);

// Covariate length expected by `condition` and `predict`.
enum ExseqStatus exseq_model_input_dim(const struct ExseqModel *handle, size_t *dim);

enum ExseqStatus exseq_model_num_observations(const struct ExseqModel *handle, size_t *n);

// Appends one observation. The model is unchanged on failure.
enum ExseqStatus exseq_model_condition(struct ExseqModel *handle,
                                       const double *x,
                                       size_t x_len,
                                       double y);

// Drops all observations.
enum ExseqStatus exseq_model_reset(struct ExseqModel *handle);

// One-step predictive N(mean, std²) of the next outcome at `x`.
enum ExseqStatus exseq_model_predict(const struct ExseqModel *handle,
                                     const double *x,
                                     size_t x_len,
                                     double *mean,
                                     double *std);

// Multi-step negative log-likelihood (summed, teacher forced) of `n`
// targets. `xs` holds `n` rows of `input_dim` covariates.
enum ExseqStatus exseq_model_multistep_nll(const struct ExseqModel *handle,
                                           const double *xs,
                                           const double *ys,
                                           size_t n,
                                           double *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXSEQ_H */
