#ifndef RNX_H
#define RNX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI exit-code contract.
 */
typedef enum RnxStatus {
  Ok = 0,
  /**
   * Invalid argument / configuration.
   */
  Parameter = 2,
  /**
   * Input data violates an invariant.
   */
  Data = 3,
  /**
   * Numerical failure (non-convergence, out-of-band price, ...).
   */
  Numeric = 4,
} RnxStatus;

/**
 * Opaque call-curve handle.
 */
typedef struct RnxSlice RnxSlice;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must point to `len` writable bytes (or be NULL with `len` 0).
 */
uintptr_t rnx_last_error(char *buf, uintptr_t len);

/**
 * Create a call curve from parallel `strikes`/`calls` arrays of length `n`
 * (strictly ascending strikes). Returns NULL on invalid input, with the
 * reason available from `rnx_last_error`.
 *
 * # Safety
 * `strikes` and `calls` must point to `n` readable doubles.
 */
struct RnxSlice *rnx_slice_new(const double *strikes,
                               const double *calls,
                               uintptr_t n,
                               double forward,
                               double rate,
                               double div_yield,
                               double maturity);

/**
 * Release a handle created by `rnx_slice_new`. NULL is a no-op.
 *
 * # Safety
 * `slice` must be a pointer previously returned by `rnx_slice_new` and not
 * already freed.
 */
void rnx_slice_free(struct RnxSlice *slice);

/**
 * Black–Scholes price (forward parameterization).
 */
double rnx_bs_price(double forward,
                    double strike,
                    double rate,
                    double maturity,
                    double vol,
                    int is_call);

/**
 * Implied volatility of `price`; writes the result through `out`.
 *
 * # Safety
 * `out` must point to a writable double.
 */
enum RnxStatus rnx_implied_vol(double price,
                               double forward,
                               double strike,
                               double rate,
                               double maturity,
                               int is_call,
                               double *out);

/**
 * Project the curve onto the no-arbitrage constraints in place. Writes the
 * largest absolute price adjustment through `max_abs_adjust` when non-null.
 *
 * # Safety
 * `slice` must be a live handle; `max_abs_adjust` NULL or writable.
 */
enum RnxStatus rnx_slice_repair(struct RnxSlice *slice, double *max_abs_adjust);

/**
 * Extract the risk-neutral density on `n_points` equally spaced grid points
 * over the traded strike range. `grid_out` and `density_out` must each hold
 * `n_points` doubles. `bandwidth <= 0` selects the default rule with
 * `bandwidth_mult`.
 *
 * # Safety
 * `slice` must be a live handle; the output buffers must hold `n_points`
 * writable doubles.
 */
enum RnxStatus rnx_rnd_extract(const struct RnxSlice *slice,
                               double bandwidth,
                               double bandwidth_mult,
                               uintptr_t n_points,
                               double *grid_out,
                               double *density_out);

/**
 * European option price under the Merton jump-diffusion.
 *
 * # Safety
 * `out` must point to a writable double.
 */
enum RnxStatus rnx_merton_price(double sigma,
                                double lambda,
                                double mu_jump,
                                double sigma_jump,
                                double rate,
                                double div_yield,
                                double forward,
                                double strike,
                                double maturity,
                                int is_call,
                                double *out);

/**
 * European option price under the Kou double-exponential jump model.
 *
 * # Safety
 * `out` must point to a writable double.
 */
enum RnxStatus rnx_kou_price(double sigma,
                             double lambda,
                             double p_up,
                             double eta_down,
                             double eta_up,
                             double rate,
                             double div_yield,
                             double forward,
                             double strike,
                             double maturity,
                             int is_call,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RNX_H */
