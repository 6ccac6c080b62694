#ifndef SINGLAB_H
#define SINGLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * ABI revision, bumped on any breaking change to this header.
 */
#define SL_ABI_VERSION 1

typedef enum sl_status {
  SL_OK = 0,
  SL_NULL_ARGUMENT = 1,
  SL_INVALID_ARGUMENT = 2,
  SL_NUMERICAL_FAILURE = 3,
  SL_PANIC = 4,
} sl_status;

/**
 * Opaque ambient flow handle.
 */
typedef struct SlFlow SlFlow;

/**
 * Opaque piecewise-monotone interval map handle.
 */
typedef struct SlMap1d SlMap1d;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * ABI revision of this library.
 */
uint32_t sl_abi_version(void);

/**
 * Static, NUL-terminated name for a status code. Never returns NULL.
 */
const char *sl_status_name(enum sl_status status);

/**
 * Exit time through a linearized singular neighborhood: -ln(x)/lambda1.
 * Returns +inf for x <= 0 and NaN when lambda1 is not positive.
 */
double sl_exit_time(double lambda1, double x);

/**
 * Create a classical Lorenz flow with parameters (sigma, r, b).
 *
 * # Safety
 * `out` must point to writable storage for one handle pointer. On success
 * it receives a handle that must be released with `sl_flow_free`.
 */
enum sl_status sl_lorenz_flow_new(double sigma, double r, double b, struct SlFlow **out);

/**
 * Release a flow handle. NULL is a no-op.
 *
 * # Safety
 * `flow` must be a handle from `sl_lorenz_flow_new` not yet freed.
 */
void sl_flow_free(struct SlFlow *flow);

/**
 * Advance `state` (length 3, updated in place) by time `t` at tolerance
 * `tol`. Negative `t` integrates backward.
 *
 * # Safety
 * `flow` must be a live handle; `state` must point to 3 readable and
 * writable doubles.
 */
enum sl_status sl_flow_step(const struct SlFlow *flow, double *state, double t, double tol);

/**
 * Benettin QR Lyapunov spectrum from `x0` over `[0, t]`, renormalizing
 * every `renorm` time units. Writes the three exponents, sorted
 * descending, into `out`.
 *
 * # Safety
 * `flow` must be a live handle; `x0` must point to 3 readable doubles;
 * `out` must point to 3 writable doubles.
 */
enum sl_status sl_flow_lyapunov(const struct SlFlow *flow,
                                const double *x0,
                                double t,
                                double renorm,
                                double *out);

/**
 * Create the geometric quotient map x -> sign(x)(mu |x|^beta - 1) with
 * beta = -lambda2 / lambda1 derived from the eigenvalue triple.
 *
 * # Safety
 * `out` must point to writable storage for one handle pointer. On success
 * it receives a handle that must be released with `sl_map_free`.
 */
enum sl_status sl_geometric_map_new(double lambda1,
                                    double lambda2,
                                    double lambda3,
                                    double mu,
                                    double half_width,
                                    struct SlMap1d **out);

/**
 * Release a map handle. NULL is a no-op.
 *
 * # Safety
 * `map` must be a handle from `sl_geometric_map_new` not yet freed.
 */
void sl_map_free(struct SlMap1d *map);

/**
 * Evaluate the map at `x`; fails on the singular set or outside the domain.
 *
 * # Safety
 * `map` must be a live handle; `out` must point to one writable double.
 */
enum sl_status sl_map_eval(const struct SlMap1d *map, double x, double *out);

/**
 * Evaluate the map derivative at `x`.
 *
 * # Safety
 * `map` must be a live handle; `out` must point to one writable double.
 */
enum sl_status sl_map_deriv(const struct SlMap1d *map, double x, double *out);

/**
 * Fill `out` with the orbit `x0, f(x0), ..., f^(len-1)(x0)`. Fails if an
 * iterate lands exactly on the singular set or escapes the domain.
 *
 * # Safety
 * `map` must be a live handle; `out` must point to `len` writable doubles.
 */
enum sl_status sl_map_orbit(const struct SlMap1d *map, double x0, double *out, size_t len);

/**
 * Stationary density of the map's Ulam discretization on `bins` uniform
 * cells: writes one density value per bin (the dominant recurrent
 * component, normalized to unit mass against bin width).
 *
 * # Safety
 * `map` must be a live handle; `out` must point to `bins` writable
 * doubles.
 */
enum sl_status sl_map_acim_density(const struct SlMap1d *map, size_t bins, double tol, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SINGLAB_H */
