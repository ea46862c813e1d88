/* C interface to the wsi-demod interferometric demodulation toolkit. */

#ifndef WSI_DEMOD_H
#define WSI_DEMOD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of an FFI call.
 */
typedef enum WsiStatus {
  /**
   * The call succeeded and all output parameters are valid.
   */
  WSI_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  WSI_STATUS_NULL_ARGUMENT = 1,
  /**
   * Arguments were outside the supported domain.
   */
  WSI_STATUS_INVALID_PARAMETER = 2,
  /**
   * A file could not be read.
   */
  WSI_STATUS_IO = 3,
  /**
   * A file was read but its contents are not a valid artifact.
   */
  WSI_STATUS_MALFORMED_FILE = 4,
  /**
   * The estimator rejected this input; not a programming error.
   */
  WSI_STATUS_ESTIMATE_FAILED = 5,
  /**
   * Any other failure.
   */
  WSI_STATUS_INTERNAL = 6,
} WsiStatus;

/**
 * Opaque wavenumber grid handle.
 */
typedef struct WsiGrid WsiGrid;

/**
 * Opaque trained-network handle.
 */
typedef struct WsiNetwork WsiNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failing call on this thread. Never null;
 * empty before the first failure. The pointer is invalidated by the next
 * failing call on the same thread.
 */
const char *wsi_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *wsi_version(void);

/**
 * Create a grid of four evenly spaced wavenumbers. `k1` is the first
 * wavenumber in rad/um, `dk` the spacing, `gain` the conversion gain in
 * electrons per ADU, `adu_max` the saturation level.
 *
 * # Safety
 * `out` must point to writable memory for one pointer.
 */
enum WsiStatus wsi_grid_new_even(double k1,
                                 double dk,
                                 double gain,
                                 uint16_t adu_max,
                                 struct WsiGrid **out);

/**
 * Create the default acquisition grid.
 *
 * # Safety
 * `out` must point to writable memory for one pointer.
 */
enum WsiStatus wsi_grid_default(struct WsiGrid **out);

/**
 * Release a grid handle. Accepts null.
 *
 * # Safety
 * `grid` must be null or a pointer returned by a grid constructor that
 * has not been freed yet.
 */
void wsi_grid_free(struct WsiGrid *grid);

/**
 * Reference wavenumber (mean of the four) in rad/um.
 *
 * # Safety
 * `grid` and `out` must be valid pointers.
 */
enum WsiStatus wsi_grid_k0(const struct WsiGrid *grid, double *out);

/**
 * Noise-free mean intensities in ADU for one scene, written to `out4[0..4]`.
 *
 * # Safety
 * `grid` must be a valid handle and `out4` must point to four writable
 * doubles.
 */
enum WsiStatus wsi_mean_intensities(const struct WsiGrid *grid,
                                    double alpha,
                                    double visibility,
                                    double opl_um,
                                    double *out4);

/**
 * Demodulate one four-band intensity vector with the quotient formula.
 * Writes the wrapped OPL in um relative to the grid's reference
 * wavenumber. Singular inputs return `EstimateFailed`.
 *
 * # Safety
 * `grid` must be a valid handle and `out_wrapped_um` must be writable.
 */
enum WsiStatus wsi_carre_demodulate(const struct WsiGrid *grid,
                                    double i1,
                                    double i2,
                                    double i3,
                                    double i4,
                                    double *out_wrapped_um);

/**
 * Lower bound on the OPL standard deviation with unknown dc and
 * amplitude, in um.
 *
 * # Safety
 * `grid` must be a valid handle and `out_sigma_um` must be writable.
 */
enum WsiStatus wsi_crb(const struct WsiGrid *grid,
                       double alpha,
                       double visibility,
                       double opl_um,
                       double *out_sigma_um);

/**
 * Lower bound when dc and amplitude are exactly known, in um.
 *
 * # Safety
 * `grid` must be a valid handle and `out_sigma_um` must be writable.
 */
enum WsiStatus wsi_spcrb(const struct WsiGrid *grid,
                         double alpha,
                         double visibility,
                         double opl_um,
                         double *out_sigma_um);

/**
 * Load a trained network from a weight file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` must point to
 * writable memory for one pointer.
 */
enum WsiStatus wsi_network_load(const char *path, struct WsiNetwork **out);

/**
 * Release a network handle. Accepts null.
 *
 * # Safety
 * `net` must be null or a pointer returned by [`wsi_network_load`] that
 * has not been freed yet.
 */
void wsi_network_free(struct WsiNetwork *net);

/**
 * The absolute OPL window in um this network was trained for.
 *
 * # Safety
 * All pointers must be valid.
 */
enum WsiStatus wsi_network_window(const struct WsiNetwork *net,
                                  double *out_lo_um,
                                  double *out_hi_um);

/**
 * Demodulate one four-band intensity vector (in ADU) into an absolute
 * OPL in um within the network's training window.
 *
 * # Safety
 * `net` must be a valid handle and `out_opl_um` must be writable.
 */
enum WsiStatus wsi_network_infer(const struct WsiNetwork *net,
                                 double i1,
                                 double i2,
                                 double i3,
                                 double i4,
                                 double *out_opl_um);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WSI_DEMOD_H */
