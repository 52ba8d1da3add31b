#ifndef DPNETS_H
#define DPNETS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DpnStatus {
  DPN_STATUS_OK = 0,
  DPN_STATUS_NULL_POINTER = 1,
  DPN_STATUS_INVALID_ARGUMENT = 2,
  DPN_STATUS_DIMENSION = 3,
  /**
   * Non-finite values, indefinite covariances, degenerate batches or aborted training.
   */
  DPN_STATUS_NUMERICAL = 4,
  DPN_STATUS_IO = 5,
  DPN_STATUS_FORMAT = 6,
  /**
   * The feature map lacks the smoothness the operation needs.
   */
  DPN_STATUS_UNSUPPORTED = 7,
  DPN_STATUS_BUFFER_TOO_SMALL = 8,
  DPN_STATUS_PANIC = 9,
} DpnStatus;

typedef enum DpnScoreKind {
  /**
   * Whitened projection score.
   */
  DPN_SCORE_KIND_P = 0,
  /**
   * Relaxed score.
   */
  DPN_SCORE_KIND_S = 1,
  /**
   * Ridge-regularized whitened score.
   */
  DPN_SCORE_KIND_RIDGE = 2,
} DpnScoreKind;

typedef enum DpnModelKind {
  DPN_MODEL_KIND_TRANSFER = 0,
  DPN_MODEL_KIND_GENERATOR = 1,
} DpnModelKind;

/**
 * Opaque MLP feature map.
 */
typedef struct DpnMlp DpnMlp;

/**
 * Opaque fitted operator model.
 */
typedef struct DpnModel DpnModel;

/**
 * `total = correlation − gamma·(distortion_x + distortion_y)`.
 */
typedef struct DpnScoreValue {
  double total;
  double correlation;
  double distortion_x;
  double distortion_y;
  double cond_x;
  double cond_y;
} DpnScoreValue;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dpn_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated, always
 * NUL-terminated when `cap > 0`) and returns the full message length plus one.
 */
size_t dpn_last_error(char *buf, size_t cap);

/**
 * Builds an MLP from a JSON spec such as
 * `{"input_dim": 1, "widths": [32, 4], "activations": ["celu", "identity"], "seed": 0}`.
 */
enum DpnStatus dpn_mlp_new(const char *spec_json, struct DpnMlp **out);

/**
 * Releases an MLP handle; null is ignored.
 */
void dpn_mlp_free(struct DpnMlp *mlp);

/**
 * Input dimension, or 0 for a null handle.
 */
size_t dpn_mlp_input_dim(const struct DpnMlp *mlp);

/**
 * Feature dimension `r`, or 0 for a null handle.
 */
size_t dpn_mlp_output_dim(const struct DpnMlp *mlp);

/**
 * Number of trainable parameters, or 0 for a null handle.
 */
size_t dpn_mlp_param_count(const struct DpnMlp *mlp);

/**
 * Copies the flattened parameters into `out`, which holds `len` doubles.
 */
enum DpnStatus dpn_mlp_get_params(const struct DpnMlp *mlp, double *out, size_t len);

/**
 * Replaces the parameters; `len` must equal the parameter count.
 */
enum DpnStatus dpn_mlp_set_params(struct DpnMlp *mlp, const double *params, size_t len);

/**
 * Evaluates the map on `m` states `x` (`d×m`) into `out` (`r×m`).
 */
enum DpnStatus dpn_mlp_eval(const struct DpnMlp *mlp, const double *x, size_t m, double *out);

/**
 * Evaluates a transfer score on feature batches `psi`, `psi_next` (both `r×m`).
 *
 * `reg` is used by the ridge score only. The gradients with respect to `psi` and
 * `psi_next` are written when the corresponding pointer is non-null.
 */
enum DpnStatus dpn_score(enum DpnScoreKind kind,
                         double gamma,
                         double reg,
                         double rtol,
                         const double *psi,
                         const double *psi_next,
                         size_t r,
                         size_t m,
                         struct DpnScoreValue *value,
                         double *grad_psi,
                         double *grad_psi_next);

/**
 * Evaluates the generator score on `psi` and its Itô image `dpsi` (both `r×m`).
 */
enum DpnStatus dpn_generator_score(double gamma,
                                   double rtol,
                                   const double *psi,
                                   const double *dpsi,
                                   size_t r,
                                   size_t m,
                                   struct DpnScoreValue *value,
                                   double *grad_psi,
                                   double *grad_dpsi);

/**
 * Samples data, trains and fits one seed of an experiment config (JSON text).
 * The fitted model has the training states registered as observable `"state"`.
 */
enum DpnStatus dpn_experiment_run(const char *config_json, uint64_t seed, struct DpnModel **out);

/**
 * Loads a model file written by the `dpnets` command line tool.
 */
enum DpnStatus dpn_model_load(const char *path, struct DpnModel **out);

enum DpnStatus dpn_model_save(const struct DpnModel *model, const char *path);

/**
 * Releases a model handle; null is ignored.
 */
void dpn_model_free(struct DpnModel *model);

enum DpnStatus dpn_model_kind(const struct DpnModel *model, enum DpnModelKind *out);

/**
 * Number of features of the model, or 0 for a null handle.
 */
size_t dpn_model_rank(const struct DpnModel *model);

/**
 * Writes the operator eigenvalues (sorted as in the model file) into `re` and
 * `im`, each of capacity `cap`, and their count into `count`. Fails with
 * `BufferTooSmall` (after setting `count`) when `cap` is insufficient.
 */
enum DpnStatus dpn_model_eigenvalues(const struct DpnModel *model,
                                     double *re,
                                     double *im,
                                     size_t cap,
                                     size_t *count);

/**
 * Dimension `ℓ` of a registered observable.
 */
enum DpnStatus dpn_model_observable_dim(const struct DpnModel *model,
                                        const char *name,
                                        size_t *out);

/**
 * Forecasts observable `name` at `m` query states `x` (`d×m`) after time `t`,
 * writing `ℓ×m` values to `out`. Transfer models need a whole number of steps.
 */
enum DpnStatus dpn_model_forecast(const struct DpnModel *model,
                                  const char *name,
                                  const double *x,
                                  size_t m,
                                  double t,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPNETS_H */
