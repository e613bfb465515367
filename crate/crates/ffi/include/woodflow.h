#ifndef WOODFLOW_H
#define WOODFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  WF_STATUS_OK = 0,
  WF_STATUS_NULL_POINTER = 1,
  WF_STATUS_INVALID_ARGUMENT = 2,
  WF_STATUS_DIMENSION_MISMATCH = 3,
  WF_STATUS_NUMERIC = 4,
  WF_STATUS_IO = 5,
  WF_STATUS_BUFFER_TOO_SMALL = 6,
  WF_STATUS_PANIC = 7,
} WfStatus;

typedef enum {
  WF_AXIS_X = 0,
  WF_AXIS_Y = 1,
} WfAxis;

/**
 * Result of a flow estimation.
 */
typedef struct WfFlow WfFlow;

/**
 * Scalar raster.
 */
typedef struct WfGrid WfGrid;

/**
 * Binary region of interest.
 */
typedef struct WfMask WfMask;

/**
 * Strain analysis of a flow field.
 */
typedef struct WfStrain WfStrain;

/**
 * Solver parameters; obtain defaults from [`wf_params_default`].
 */
typedef struct {
  double lambda;
  double beta;
  double eps_flow;
  double eps_ilu;
  uint32_t warps;
  uint32_t pd_iters;
  double pyramid_scale;
  /**
   * Pyramid levels; 0 selects them from the image size.
   */
  uint32_t levels;
  bool median_flow_filter;
  bool illumination_on_coarse_levels;
} WfSolverParams;

/**
 * Scalar outputs of a flow estimation.
 */
typedef struct {
  double energy;
  /**
   * Mean rotation in radians.
   */
  double delta_theta_avg;
  double v_avg_x;
  double v_avg_y;
} WfFlowSummary;

/**
 * Coefficient profile statistics along one axis. Undefined values are NaN.
 */
typedef struct {
  size_t positions;
  double mean_small;
  double var_small;
  double mean_green;
  double var_green;
  double mean_green_with_cracks;
  double var_green_with_cracks;
} WfProfileSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message of the last failed call on this thread into `buf`
 * (NUL-terminated, truncated to `len`). Returns the full message length
 * including the terminator; 1 when there is no error.
 */
size_t wf_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *wf_version(void);

WfStatus wf_grid_new(size_t width, size_t height, const double *data, WfGrid **out);

void wf_grid_free(WfGrid *grid);

WfStatus wf_grid_dims(const WfGrid *grid, size_t *width, size_t *height);

WfStatus wf_grid_copy(const WfGrid *grid, double *out, size_t len);

/**
 * Mask from bytes; any nonzero byte is inside.
 */
WfStatus wf_mask_new(size_t width, size_t height, const uint8_t *data, WfMask **out);

void wf_mask_free(WfMask *mask);

WfStatus wf_params_default(WfSolverParams *out);

/**
 * Coarse-to-fine flow from `i1` to `i2` over `mask`. `params` may be null
 * for the defaults.
 */
WfStatus wf_flow_estimate(const WfGrid *i1,
                          const WfGrid *i2,
                          const WfMask *mask,
                          const WfSolverParams *params,
                          WfFlow **out);

void wf_flow_free(WfFlow *flow);

WfStatus wf_flow_summary(const WfFlow *flow, WfFlowSummary *out);

/**
 * Copies the displacement components into two caller buffers of `len` values.
 */
WfStatus wf_flow_copy_field(const WfFlow *flow, double *vx, double *vy, size_t len);

/**
 * Copies the illumination field `u`.
 */
WfStatus wf_flow_copy_illumination(const WfFlow *flow, double *out, size_t len);

/**
 * Writes the flow as a `.flo` raster.
 */
WfStatus wf_flow_write_flo(const WfFlow *flow, const char *path);

/**
 * Strain fields and coefficient profiles of `flow` over `mask`.
 * `crack_factor`, `min_span` and `min_averaged` of zero select defaults.
 */
WfStatus wf_strain_analyze(const WfFlow *flow,
                           const WfMask *mask,
                           double delta_rh,
                           double crack_factor,
                           size_t min_span,
                           size_t min_averaged,
                           WfStrain **out);

void wf_strain_free(WfStrain *strain);

WfStatus wf_strain_profile_summary(const WfStrain *strain, WfAxis axis, WfProfileSummary *out);

/**
 * Copies one profile: positions (as doubles), small-strain and Green-strain
 * coefficients. Green values omitted because of cracks are NaN. Each buffer
 * must hold the `positions` count from [`wf_strain_profile_summary`].
 */
WfStatus wf_strain_copy_profile(const WfStrain *strain,
                                WfAxis axis,
                                double *positions,
                                double *k_small,
                                double *k_green,
                                size_t len);

WfStatus wf_strain_crack_count(const WfStrain *strain, size_t *out);

/**
 * `r·(1 − cos(asin(delta_y/r)))`, the apparent displacement caused by an
 * out-of-plane offset on a surface of radius `r` (same length unit).
 */
WfStatus wf_projection_error(double r, double delta_y, double *out);

/**
 * Huber function value; NaN for a negative threshold.
 */
double wf_huber(double alpha, double eps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WOODFLOW_H */
