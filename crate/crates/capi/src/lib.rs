//! C ABI over the core library.
//!
//! Conventions: every fallible call returns an `sl_status` and writes its
//! results through out-pointers; handles are opaque and freed exactly once
//! by the matching `_free`; `NULL` is always rejected, never dereferenced;
//! panics are caught at the boundary and surface as `SL_PANIC`.

use singlab::acim::{build_ulam, stationary_density};
use singlab::flow::{FlowSystem, State};
use singlab::map1d::{BranchMap1D, Map1dError};
use singlab::models::{
    exit_time, geometric_lorenz_map, lorenz_field, GeometricLorenzSpec, LorenzLikeEigenvalues,
};
use singlab::ode::StepControl;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

/// ABI revision, bumped on any breaking change to this header.
pub const SL_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[allow(non_camel_case_types)]
pub enum sl_status {
    SL_OK = 0,
    SL_NULL_ARGUMENT = 1,
    SL_INVALID_ARGUMENT = 2,
    SL_NUMERICAL_FAILURE = 3,
    SL_PANIC = 4,
}

use sl_status::*;

/// Opaque ambient flow handle.
pub struct SlFlow {
    inner: FlowSystem,
}

/// Opaque piecewise-monotone interval map handle.
pub struct SlMap1d {
    inner: BranchMap1D,
}

fn guarded(body: impl FnOnce() -> sl_status) -> sl_status {
    catch_unwind(AssertUnwindSafe(body)).unwrap_or(SL_PANIC)
}

fn ctrl_for(tol: f64) -> StepControl {
    StepControl {
        tol,
        max_step: 0.25,
        ..StepControl::default()
    }
}

fn map_err_status(e: &Map1dError) -> sl_status {
    match e {
        Map1dError::OnSingular { .. } | Map1dError::OutsideDomain { .. } => SL_NUMERICAL_FAILURE,
    }
}

/// ABI revision of this library.
#[no_mangle]
pub extern "C" fn sl_abi_version() -> u32 {
    SL_ABI_VERSION
}

/// Static, NUL-terminated name for a status code. Never returns NULL.
#[no_mangle]
pub extern "C" fn sl_status_name(status: sl_status) -> *const c_char {
    let name: &'static [u8] = match status {
        SL_OK => b"SL_OK\0",
        SL_NULL_ARGUMENT => b"SL_NULL_ARGUMENT\0",
        SL_INVALID_ARGUMENT => b"SL_INVALID_ARGUMENT\0",
        SL_NUMERICAL_FAILURE => b"SL_NUMERICAL_FAILURE\0",
        SL_PANIC => b"SL_PANIC\0",
    };
    name.as_ptr() as *const c_char
}

/// Exit time through a linearized singular neighborhood: -ln(x)/lambda1.
/// Returns +inf for x <= 0 and NaN when lambda1 is not positive.
#[no_mangle]
pub extern "C" fn sl_exit_time(lambda1: f64, x: f64) -> f64 {
    if !(lambda1 > 0.0) {
        return f64::NAN;
    }
    exit_time(lambda1, x)
}

// ---------------------------------------------------------------------------
// Ambient flow
// ---------------------------------------------------------------------------

/// Create a classical Lorenz flow with parameters (sigma, r, b).
///
/// # Safety
/// `out` must point to writable storage for one handle pointer. On success
/// it receives a handle that must be released with `sl_flow_free`.
#[no_mangle]
pub unsafe extern "C" fn sl_lorenz_flow_new(
    sigma: f64,
    r: f64,
    b: f64,
    out: *mut *mut SlFlow,
) -> sl_status {
    if out.is_null() {
        return SL_NULL_ARGUMENT;
    }
    guarded(|| {
        if !(sigma > 0.0 && r > 0.0 && b > 0.0) {
            return SL_INVALID_ARGUMENT;
        }
        let handle = Box::new(SlFlow {
            inner: lorenz_field(sigma, r, b),
        });
        unsafe { out.write(Box::into_raw(handle)) };
        SL_OK
    })
}

/// Release a flow handle. NULL is a no-op.
///
/// # Safety
/// `flow` must be a handle from `sl_lorenz_flow_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_flow_free(flow: *mut SlFlow) {
    if !flow.is_null() {
        drop(unsafe { Box::from_raw(flow) });
    }
}

/// Advance `state` (length 3, updated in place) by time `t` at tolerance
/// `tol`. Negative `t` integrates backward.
///
/// # Safety
/// `flow` must be a live handle; `state` must point to 3 readable and
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sl_flow_step(
    flow: *const SlFlow,
    state: *mut f64,
    t: f64,
    tol: f64,
) -> sl_status {
    if flow.is_null() || state.is_null() {
        return SL_NULL_ARGUMENT;
    }
    guarded(|| {
        if !(tol > 0.0) || !t.is_finite() {
            return SL_INVALID_ARGUMENT;
        }
        let sys = unsafe { &(*flow).inner };
        let x0 = unsafe { State::new(*state, *state.add(1), *state.add(2)) };
        match sys.flow_to(x0, t, &ctrl_for(tol)) {
            Ok(x1) => {
                for i in 0..3 {
                    unsafe { state.add(i).write(x1[i]) };
                }
                SL_OK
            }
            Err(_) => SL_NUMERICAL_FAILURE,
        }
    })
}

/// Benettin QR Lyapunov spectrum from `x0` over `[0, t]`, renormalizing
/// every `renorm` time units. Writes the three exponents, sorted
/// descending, into `out`.
///
/// # Safety
/// `flow` must be a live handle; `x0` must point to 3 readable doubles;
/// `out` must point to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sl_flow_lyapunov(
    flow: *const SlFlow,
    x0: *const f64,
    t: f64,
    renorm: f64,
    out: *mut f64,
) -> sl_status {
    if flow.is_null() || x0.is_null() || out.is_null() {
        return SL_NULL_ARGUMENT;
    }
    guarded(|| {
        if !(t > 0.0) || !(renorm > 0.0) || renorm > t {
            return SL_INVALID_ARGUMENT;
        }
        let sys = unsafe { &(*flow).inner };
        let seed = unsafe { State::new(*x0, *x0.add(1), *x0.add(2)) };
        match sys.qr_lyapunov(seed, t, renorm, &ctrl_for(1e-9)) {
            Ok(est) => {
                for i in 0..3 {
                    unsafe { out.add(i).write(est.exponents[i]) };
                }
                SL_OK
            }
            Err(_) => SL_NUMERICAL_FAILURE,
        }
    })
}

// ---------------------------------------------------------------------------
// Quotient map
// ---------------------------------------------------------------------------

/// Create the geometric quotient map x -> sign(x)(mu |x|^beta - 1) with
/// beta = -lambda2 / lambda1 derived from the eigenvalue triple.
///
/// # Safety
/// `out` must point to writable storage for one handle pointer. On success
/// it receives a handle that must be released with `sl_map_free`.
#[no_mangle]
pub unsafe extern "C" fn sl_geometric_map_new(
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    mu: f64,
    half_width: f64,
    out: *mut *mut SlMap1d,
) -> sl_status {
    if out.is_null() {
        return SL_NULL_ARGUMENT;
    }
    guarded(|| {
        let Ok(eigenvalues) = LorenzLikeEigenvalues::new(lambda1, lambda2, lambda3) else {
            return SL_INVALID_ARGUMENT;
        };
        let spec = GeometricLorenzSpec {
            eigenvalues,
            mu,
            half_width,
        };
        let Ok(map) = geometric_lorenz_map(&spec) else {
            return SL_INVALID_ARGUMENT;
        };
        let handle = Box::new(SlMap1d { inner: map });
        unsafe { out.write(Box::into_raw(handle)) };
        SL_OK
    })
}

/// Release a map handle. NULL is a no-op.
///
/// # Safety
/// `map` must be a handle from `sl_geometric_map_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_map_free(map: *mut SlMap1d) {
    if !map.is_null() {
        drop(unsafe { Box::from_raw(map) });
    }
}

/// Evaluate the map at `x`; fails on the singular set or outside the domain.
///
/// # Safety
/// `map` must be a live handle; `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn sl_map_eval(map: *const SlMap1d, x: f64, out: *mut f64) -> sl_status {
    if map.is_null() || out.is_null() {
        return SL_NULL_ARGUMENT;
    }
    guarded(|| match unsafe { &(*map).inner }.eval(x) {
        Ok(y) => {
            unsafe { out.write(y) };
            SL_OK
        }
        Err(e) => map_err_status(&e),
    })
}

/// Evaluate the map derivative at `x`.
///
/// # Safety
/// `map` must be a live handle; `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn sl_map_deriv(map: *const SlMap1d, x: f64, out: *mut f64) -> sl_status {
    if map.is_null() || out.is_null() {
        return SL_NULL_ARGUMENT;
    }
    guarded(|| match unsafe { &(*map).inner }.deriv(x) {
        Ok(y) => {
            unsafe { out.write(y) };
            SL_OK
        }
        Err(e) => map_err_status(&e),
    })
}

/// Fill `out` with the orbit `x0, f(x0), ..., f^(len-1)(x0)`. Fails if an
/// iterate lands exactly on the singular set or escapes the domain.
///
/// # Safety
/// `map` must be a live handle; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sl_map_orbit(
    map: *const SlMap1d,
    x0: f64,
    out: *mut f64,
    len: usize,
) -> sl_status {
    if map.is_null() || out.is_null() {
        return SL_NULL_ARGUMENT;
    }
    guarded(|| {
        if len == 0 {
            return SL_INVALID_ARGUMENT;
        }
        match unsafe { &(*map).inner }.orbit(x0, len - 1) {
            Ok(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    unsafe { out.add(i).write(*x) };
                }
                SL_OK
            }
            Err(e) => map_err_status(&e),
        }
    })
}

/// Stationary density of the map's Ulam discretization on `bins` uniform
/// cells: writes one density value per bin (the dominant recurrent
/// component, normalized to unit mass against bin width).
///
/// # Safety
/// `map` must be a live handle; `out` must point to `bins` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn sl_map_acim_density(
    map: *const SlMap1d,
    bins: usize,
    tol: f64,
    out: *mut f64,
) -> sl_status {
    if map.is_null() || out.is_null() {
        return SL_NULL_ARGUMENT;
    }
    guarded(|| {
        if !(2..=1_000_000).contains(&bins) || !(tol > 0.0) {
            return SL_INVALID_ARGUMENT;
        }
        let inner = unsafe { &(*map).inner };
        let Ok(chain) = build_ulam(inner, bins) else {
            return SL_NUMERICAL_FAILURE;
        };
        let Ok(dec) = stationary_density(&chain, tol) else {
            return SL_NUMERICAL_FAILURE;
        };
        let Some(c_star) = (0..dec.densities.len()).max_by(|&i, &j| {
            let mi: f64 = dec.masses(i).iter().sum();
            let mj: f64 = dec.masses(j).iter().sum();
            mi.partial_cmp(&mj).unwrap()
        }) else {
            return SL_NUMERICAL_FAILURE;
        };
        for (i, d) in dec.densities[c_star].iter().enumerate() {
            unsafe { out.add(i).write(*d) };
        }
        SL_OK
    })
}
