/* C interface for the taco encoder library. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum TacoStatus {
  TACO_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  TACO_STATUS_NULL_ARGUMENT = 1,
  /**
   * A path was not valid UTF-8 or could not be read.
   */
  TACO_STATUS_BAD_PATH = 2,
  /**
   * The checkpoint file is malformed.
   */
  TACO_STATUS_BAD_CHECKPOINT = 3,
  /**
   * Buffer lengths or shapes do not match the model.
   */
  TACO_STATUS_BAD_SHAPE = 4,
  /**
   * Input values are non-finite or otherwise out of domain.
   */
  TACO_STATUS_BAD_INPUT = 5,
  /**
   * Any other internal failure.
   */
  TACO_STATUS_INTERNAL = 6,
} TacoStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct TacoModel TacoModel;

/**
 * Fixed facts about a loaded model.
 */
typedef struct TacoModelInfo {
  size_t volume_shape[3];
  size_t patch[3];
  size_t token_count;
  size_t patch_len;
  size_t feature_dim;
  size_t depth;
  uint64_t trained_steps;
} TacoModelInfo;

/**
 * Alignment statistics between two encoded token sets; distances are
 * cosine, retrieval fields are percentages in [0, 100].
 */
typedef struct TacoAlignment {
  size_t token_count;
  double pos_mean;
  double pos_std;
  double neg_mean;
  double neg_std;
  double hard_neg_mean;
  double hard_neg_std;
  double neg_pos_gap;
  double hard_neg_pos_gap;
  double top1_retrieval;
  double top5_retrieval;
  double pairwise_rank_acc;
  double mnn_selected_ratio;
} TacoAlignment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static version string of the library; never freed by the caller.
 */
const char *taco_version(void);

/**
 * Short static name for a status code; never freed by the caller.
 */
const char *taco_status_name(enum TacoStatus status);

/**
 * Loads a trained checkpoint from a NUL-terminated UTF-8 path.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to a writable
 * `*mut TacoModel` slot. On `Ok` the caller owns the handle and must
 * release it with [`taco_model_free`].
 */
enum TacoStatus taco_model_load(const char *path, struct TacoModel **out);

/**
 * Releases a handle from [`taco_model_load`]. Null is a no-op.
 *
 * # Safety
 * `model` must be a handle returned by [`taco_model_load`] that has not
 * been freed already.
 */
void taco_model_free(struct TacoModel *model);

/**
 * Reads the model's fixed dimensions.
 *
 * # Safety
 * `model` must be a live handle and `info` a writable struct pointer.
 */
enum TacoStatus taco_model_info(const struct TacoModel *model, struct TacoModelInfo *info);

/**
 * Encodes one volume to token features.
 *
 * `voxels` is the full z-major volume (`volume_shape` product values);
 * `features` receives `token_count * feature_dim` values, token-major.
 *
 * # Safety
 * `model` must be a live handle; `voxels` must hold `voxels_len` readable
 * values and `features` must hold `features_len` writable values.
 */
enum TacoStatus taco_model_encode(const struct TacoModel *model,
                                  const double *voxels,
                                  size_t voxels_len,
                                  double *features,
                                  size_t features_len);

/**
 * Scores alignment between two token feature sets of `k` rows and `f`
 * columns each, row i of one corresponding to row i of the other.
 *
 * # Safety
 * `za` and `zb` must each hold `k * f` readable values and `out` must be
 * a writable struct pointer.
 */
enum TacoStatus taco_alignment(const double *za,
                               const double *zb,
                               size_t k,
                               size_t f,
                               struct TacoAlignment *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
