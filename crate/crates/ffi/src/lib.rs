//! C ABI over the core library: Black–Scholes pricing and implied vol,
//! arbitrage repair of call curves, risk-neutral density extraction, and
//! Merton/Kou characteristic-function pricing.
//!
//! Conventions: every fallible call returns an `RnxStatus` (0 success; the
//! nonzero values mirror the CLI exit codes). Surfaces are held behind an
//! opaque handle created with `rnx_slice_new` and released with
//! `rnx_slice_free`. Output buffers are caller-allocated; their required
//! lengths are documented per function. The most recent error message is
//! retrievable per thread via `rnx_last_error`.

use std::cell::RefCell;
use std::os::raw::{c_char, c_int};

use rnx_core::error::Error;
use rnx_core::pricing::{bs_price, implied_vol, BsInputs};
use rnx_core::quotes::SurfaceSlice;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.to_string());
}

/// Status codes mirroring the CLI exit-code contract.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnxStatus {
    Ok = 0,
    /// Invalid argument / configuration.
    Parameter = 2,
    /// Input data violates an invariant.
    Data = 3,
    /// Numerical failure (non-convergence, out-of-band price, ...).
    Numeric = 4,
}

fn status_of(e: &Error) -> RnxStatus {
    match e.exit_code() {
        2 => RnxStatus::Parameter,
        3 => RnxStatus::Data,
        _ => RnxStatus::Numeric,
    }
}

fn fail(e: &Error) -> RnxStatus {
    set_error(&e.to_string());
    status_of(e)
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to `len` writable bytes (or be NULL with `len` 0).
#[no_mangle]
pub unsafe extern "C" fn rnx_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Opaque call-curve handle.
pub struct RnxSlice {
    inner: SurfaceSlice,
}

/// Create a call curve from parallel `strikes`/`calls` arrays of length `n`
/// (strictly ascending strikes). Returns NULL on invalid input, with the
/// reason available from `rnx_last_error`.
///
/// # Safety
/// `strikes` and `calls` must point to `n` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn rnx_slice_new(
    strikes: *const f64,
    calls: *const f64,
    n: usize,
    forward: f64,
    rate: f64,
    div_yield: f64,
    maturity: f64,
) -> *mut RnxSlice {
    if strikes.is_null() || calls.is_null() || n == 0 {
        set_error("strikes/calls must be non-null and n > 0");
        return std::ptr::null_mut();
    }
    let strikes = std::slice::from_raw_parts(strikes, n).to_vec();
    let calls = std::slice::from_raw_parts(calls, n).to_vec();
    let quote_date = chrono::NaiveDate::from_ymd_opt(2000, 1, 1).expect("static date");
    let days = (maturity * 365.0).round().max(1.0) as i64;
    let slice = SurfaceSlice {
        ticker: String::new(),
        quote_date,
        expiry: quote_date + chrono::Duration::days(days),
        maturity_years: maturity,
        strikes,
        calls,
        forward,
        rate,
        div_yield,
    };
    match slice.validate() {
        Ok(()) => Box::into_raw(Box::new(RnxSlice { inner: slice })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Release a handle created by `rnx_slice_new`. NULL is a no-op.
///
/// # Safety
/// `slice` must be a pointer previously returned by `rnx_slice_new` and not
/// already freed.
#[no_mangle]
pub unsafe extern "C" fn rnx_slice_free(slice: *mut RnxSlice) {
    if !slice.is_null() {
        drop(Box::from_raw(slice));
    }
}

/// Black–Scholes price (forward parameterization).
#[no_mangle]
pub extern "C" fn rnx_bs_price(
    forward: f64,
    strike: f64,
    rate: f64,
    maturity: f64,
    vol: f64,
    is_call: c_int,
) -> f64 {
    bs_price(&BsInputs { forward, strike, rate, maturity, vol, is_call: is_call != 0 })
}

/// Implied volatility of `price`; writes the result through `out`.
///
/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn rnx_implied_vol(
    price: f64,
    forward: f64,
    strike: f64,
    rate: f64,
    maturity: f64,
    is_call: c_int,
    out: *mut f64,
) -> RnxStatus {
    if out.is_null() {
        set_error("out must be non-null");
        return RnxStatus::Parameter;
    }
    let inp = BsInputs { forward, strike, rate, maturity, vol: 0.0, is_call: is_call != 0 };
    match implied_vol(price, &inp) {
        Ok(v) => {
            *out = v;
            RnxStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Project the curve onto the no-arbitrage constraints in place. Writes the
/// largest absolute price adjustment through `max_abs_adjust` when non-null.
///
/// # Safety
/// `slice` must be a live handle; `max_abs_adjust` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn rnx_slice_repair(
    slice: *mut RnxSlice,
    max_abs_adjust: *mut f64,
) -> RnxStatus {
    if slice.is_null() {
        set_error("slice must be non-null");
        return RnxStatus::Parameter;
    }
    let s = &mut (*slice).inner;
    match rnx_core::repair::repair_slice(s) {
        Ok(rep) => {
            if !max_abs_adjust.is_null() {
                *max_abs_adjust = rep.max_abs_adjust;
            }
            *s = rep.slice;
            RnxStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Extract the risk-neutral density on `n_points` equally spaced grid points
/// over the traded strike range. `grid_out` and `density_out` must each hold
/// `n_points` doubles. `bandwidth <= 0` selects the default rule with
/// `bandwidth_mult`.
///
/// # Safety
/// `slice` must be a live handle; the output buffers must hold `n_points`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rnx_rnd_extract(
    slice: *const RnxSlice,
    bandwidth: f64,
    bandwidth_mult: f64,
    n_points: usize,
    grid_out: *mut f64,
    density_out: *mut f64,
) -> RnxStatus {
    if slice.is_null() || grid_out.is_null() || density_out.is_null() {
        set_error("slice and output buffers must be non-null");
        return RnxStatus::Parameter;
    }
    let bw = if bandwidth > 0.0 { Some(bandwidth) } else { None };
    match rnx_core::rnd::extract_rnd_on(&(*slice).inner, bw, bandwidth_mult, n_points) {
        Ok(curve) => {
            std::ptr::copy_nonoverlapping(curve.grid.as_ptr(), grid_out, n_points);
            std::ptr::copy_nonoverlapping(curve.values.as_ptr(), density_out, n_points);
            RnxStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// European option price under the Merton jump-diffusion.
///
/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn rnx_merton_price(
    sigma: f64,
    lambda: f64,
    mu_jump: f64,
    sigma_jump: f64,
    rate: f64,
    div_yield: f64,
    forward: f64,
    strike: f64,
    maturity: f64,
    is_call: c_int,
    out: *mut f64,
) -> RnxStatus {
    if out.is_null() {
        set_error("out must be non-null");
        return RnxStatus::Parameter;
    }
    let params = rnx_core::jumps::MertonParams {
        sigma,
        lambda_s: lambda,
        mu_s: mu_jump,
        sigma_s: sigma_jump,
        rate,
        div_yield,
    };
    if let Err(e) = params.validate() {
        return fail(&e);
    }
    match rnx_core::jumps::merton_price(&params, strike, forward, maturity, is_call != 0) {
        Ok(p) => {
            *out = p;
            RnxStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// European option price under the Kou double-exponential jump model.
///
/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn rnx_kou_price(
    sigma: f64,
    lambda: f64,
    p_up: f64,
    eta_down: f64,
    eta_up: f64,
    rate: f64,
    div_yield: f64,
    forward: f64,
    strike: f64,
    maturity: f64,
    is_call: c_int,
    out: *mut f64,
) -> RnxStatus {
    if out.is_null() {
        set_error("out must be non-null");
        return RnxStatus::Parameter;
    }
    let params = rnx_core::jumps::KouParams {
        sigma,
        lambda,
        p_up,
        eta1: eta_down,
        eta2: eta_up,
        rate,
        div_yield,
    };
    if let Err(e) = params.validate() {
        return fail(&e);
    }
    match rnx_core::jumps::kou_price(&params, strike, forward, maturity, is_call != 0) {
        Ok(p) => {
            *out = p;
            RnxStatus::Ok
        }
        Err(e) => fail(&e),
    }
}
