#ifndef DEXPIPE_H
#define DEXPIPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define DEX_POSE_LEN 7

#define DEX_FINGERS 4

#define DEX_HAND_JOINTS 16

#define DEX_STATE_LEN 46

#define DEX_OBS_COLUMNS 6

typedef enum DexStatus {
  DEX_STATUS_OK = 0,
  DEX_STATUS_NULL_POINTER = 1,
  DEX_STATUS_INVALID_ARGUMENT = 2,
  DEX_STATUS_IO = 3,
  DEX_STATUS_FORMAT = 4,
  DEX_STATUS_CHECKSUM = 5,
  DEX_STATUS_BUFFER_TOO_SMALL = 6,
  DEX_STATUS_POLICY = 7,
  DEX_STATUS_PANIC = 8,
} DexStatus;

typedef struct DexDataset DexDataset;

typedef struct DexHandModel DexHandModel;

typedef struct DexReplayPolicy DexReplayPolicy;

/*
 Damped least-squares IK settings.
 */
typedef struct DexIkParams {
  double lambda;
  /*
   Residual tolerance, meters.
   */
  double tol;
  uint32_t max_iter;
  /*
   Largest joint change per iteration, radians.
   */
  double step_clamp;
} DexIkParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread, or null. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *dex_last_error(void);

/*
 Static name of a status code.
 */
const char *dex_status_name(enum DexStatus status);

/*
 `out = a ∘ b`. Poses are `[w, x, y, z, tx, ty, tz]`; `out` may alias an input.

 # Safety
 Each pointer must reference seven doubles.
 */
enum DexStatus dex_pose_compose(const double *a, const double *b, double *out);

/*
 # Safety
 `pose` and `out` must reference seven doubles.
 */
enum DexStatus dex_pose_inverse(const double *pose, double *out);

/*
 Applies `pose` to `count` packed xyz points. `out` may alias `points`.

 # Safety
 `pose` must reference seven doubles; `points` and `out` `3 * count` doubles.
 */
enum DexStatus dex_transform_points(const double *pose,
                                    const double *points,
                                    size_t count,
                                    double *out);

/*
 The built-in four-finger hand model.
 */
struct DexHandModel *dex_hand_model_builtin(void);

/*
 Loads a hand model JSON file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DexStatus dex_hand_model_load(const char *path, struct DexHandModel **out);

/*
 # Safety
 `model` must come from this library and not be freed twice.
 */
void dex_hand_model_free(struct DexHandModel *model);

/*
 Writes `[lo, hi]` pairs for all joints into `out` (`2 * DEX_HAND_JOINTS` doubles).

 # Safety
 `model` must be a live handle and `out` must hold 32 doubles.
 */
enum DexStatus dex_hand_model_limits(const struct DexHandModel *model, double *out);

/*
 Fingertip positions in the wrist frame for joint angles `q`, written as
 four packed xyz triples. `clamped` (nullable) reports whether any angle
 was outside its limits.

 # Safety
 `q` must hold 16 doubles and `tips_out` 12.
 */
enum DexStatus dex_fk(const struct DexHandModel *model,
                      const double *q,
                      double *tips_out,
                      bool *clamped);

struct DexIkParams dex_ik_params_default(void);

/*
 Solves joint angles reaching the four wrist-frame `targets` (12 doubles).
 `init` and `params` may be null for mid-range and default settings.
 `residuals_out` (4 doubles) and `iterations_out` are optional.

 # Safety
 Non-null pointers must reference buffers of the documented sizes.
 */
enum DexStatus dex_ik_fingertips(const struct DexHandModel *model,
                                 const double *targets,
                                 const double *init,
                                 const struct DexIkParams *params,
                                 double *joints_out,
                                 double *residuals_out,
                                 uint32_t *iterations_out);

/*
 Opens a `.dxd` dataset file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DexStatus dex_dataset_open(const char *path, struct DexDataset **out);

/*
 # Safety
 `dataset` must come from this library and not be freed twice.
 */
void dex_dataset_free(struct DexDataset *dataset);

/*
 Number of demos, or 0 for a null handle.

 # Safety
 `dataset` must be null or a live handle.
 */
size_t dex_dataset_demo_count(const struct DexDataset *dataset);

/*
 Total number of steps, or 0 for a null handle.

 # Safety
 `dataset` must be null or a live handle.
 */
size_t dex_dataset_step_count(const struct DexDataset *dataset);

/*
 Points per observation, or 0 for a null handle.

 # Safety
 `dataset` must be null or a live handle.
 */
size_t dex_dataset_points(const struct DexDataset *dataset);

/*
 Steps in demo `demo`.

 # Safety
 `dataset` must be a live handle and `out` a valid pointer.
 */
enum DexStatus dex_dataset_demo_len(const struct DexDataset *dataset, size_t demo, size_t *out);

/*
 Copies the state and action of one step (`DEX_STATE_LEN` doubles each).
 Either output may be null.

 # Safety
 `dataset` must be a live handle; non-null outputs must hold 46 doubles.
 */
enum DexStatus dex_dataset_step(const struct DexDataset *dataset,
                                size_t demo,
                                size_t step,
                                double *state_out,
                                double *action_out);

/*
 Copies the observation of one step, `k * 6` floats in `[x y z r g b]` rows.

 # Safety
 `dataset` must be a live handle and `out` must hold `capacity` floats.
 */
enum DexStatus dex_dataset_observation(const struct DexDataset *dataset,
                                       size_t demo,
                                       size_t step,
                                       float *out,
                                       size_t capacity);

/*
 Nearest-neighbour replay policy over a copy of `dataset`.

 # Safety
 `dataset` must be a live handle and `out` a valid pointer.
 */
enum DexStatus dex_replay_policy_new(const struct DexDataset *dataset,
                                     struct DexReplayPolicy **out);

/*
 # Safety
 `policy` must come from this library and not be freed twice.
 */
void dex_replay_policy_free(struct DexReplayPolicy *policy);

/*
 Chunk length `d`, or 0 for a null handle.

 # Safety
 `policy` must be null or a live handle.
 */
size_t dex_replay_policy_horizon(const struct DexReplayPolicy *policy);

/*
 Queries the policy. `cloud` holds `k * 6` floats (null when `k` is 0),
 `state` holds `DEX_STATE_LEN` doubles. Writes `d * DEX_STATE_LEN` doubles
 to `actions_out`.

 # Safety
 Pointers must reference buffers of the documented sizes; `actions_out`
 must hold `capacity` doubles.
 */
enum DexStatus dex_replay_policy_act(const struct DexReplayPolicy *policy,
                                     const float *cloud,
                                     size_t k,
                                     const double *state,
                                     double *actions_out,
                                     size_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEXPIPE_H */
