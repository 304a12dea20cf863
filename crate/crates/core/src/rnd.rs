//! Risk-neutral density and CDF extraction from repaired call prices.
//!
//! At each of 100 equally spaced grid strikes K the call curve is fit by a
//! Gaussian-kernel-weighted degree-4 local polynomial in (K_i − K), with the
//! curvature coefficient constrained to β₂ ≥ 0. Then
//!   density f*(K) = e^{rT} · 2β₂,   CDF F*(K) = 1 + e^{rT} β₁ (clamped,
//! monotone-enforced). Total mass is recorded, never forced to 1: the tails
//! beyond the traded support are left untouched, and moments renormalize.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{norm_cdf, norm_pdf, trapezoid};
use crate::pricing::{bs_vega, implied_vol, BsInputs};
use crate::quotes::SurfaceSlice;

pub const GRID_POINTS: usize = 100;
/// Default multiplier on the Silverman-style rule h = 1.06·sd(K)·n^{−1/5}.
pub const DEFAULT_BANDWIDTH_MULT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    RiskNeutral,
    Physical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityCurve {
    /// Equally spaced ascending strikes spanning the traded support.
    pub grid: Vec<f64>,
    /// Density per currency unit; exact zeros where the constraint binds.
    pub values: Vec<f64>,
    pub maturity: f64,
    pub discount: f64,
    pub kind: DensityKind,
    /// Trapezoid integral over the grid.
    pub mass: f64,
    /// Grid points where the local design stayed rank-deficient after
    /// bandwidth widening.
    pub unsupported: Vec<bool>,
    /// Bandwidth actually used (post-widening it is per-point; this is the
    /// base value).
    pub bandwidth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CdfCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub maturity: f64,
    pub unsupported: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RndMoments {
    pub mean: f64,
    pub variance: f64,
    /// Undefined (None) for degenerate single-point mass.
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    pub support: (f64, f64),
}

/// Silverman-style default bandwidth in strike units.
pub fn default_bandwidth(strikes: &[f64], multiplier: f64) -> f64 {
    let n = strikes.len() as f64;
    1.06 * crate::math::sample_sd(strikes) * n.powf(-0.2) * multiplier
}

/// β coefficients of the kernel-weighted degree-4 fit at `k0`, with β₂ ≥ 0.
/// Returns None when the design stays rank-deficient after widening the
/// bandwidth by 2× up to 3 times.
fn local_fit(strikes: &[f64], calls: &[f64], k0: f64, h0: f64) -> Option<(f64, f64)> {
    let n = strikes.len();
    let mut h = h0;
    for _attempt in 0..4 {
        // weights and scaled design in u = (K - k0)/h for conditioning
        let w: Vec<f64> = strikes.iter().map(|&k| norm_pdf((k - k0) / h).sqrt()).collect();
        let effective = w.iter().filter(|&&x| x > 1e-6).count();
        if effective >= 5 {
            let x = DMatrix::from_fn(n, 5, |i, p| {
                let u = (strikes[i] - k0) / h;
                w[i] * u.powi(p as i32)
            });
            let y = DVector::from_fn(n, |i, _| w[i] * calls[i]);
            if let Some(beta) = wls_solve(&x, &y) {
                let (b1, b2) = (beta[1] / h, beta[2] / (h * h));
                if b2 >= 0.0 {
                    return Some((b1, b2));
                }
                // constraint binds: curvature pinned at zero, refit the rest
                let x4 = DMatrix::from_fn(n, 4, |i, p| {
                    let u = (strikes[i] - k0) / h;
                    let pow = if p < 2 { p as i32 } else { p as i32 + 1 };
                    w[i] * u.powi(pow)
                });
                if let Some(beta4) = wls_solve(&x4, &y) {
                    return Some((beta4[1] / h, 0.0));
                }
            }
        }
        h *= 2.0;
    }
    None
}

fn wls_solve(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = x.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * max_sv).count();
    if rank < x.ncols() {
        return None;
    }
    svd.solve(y, 1e-10 * max_sv).ok()
}

fn make_grid_n(strikes: &[f64], n: usize) -> Vec<f64> {
    let (lo, hi) = (strikes[0], strikes[strikes.len() - 1]);
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

fn make_grid(strikes: &[f64]) -> Vec<f64> {
    make_grid_n(strikes, GRID_POINTS)
}

/// Risk-neutral density on a 100-point grid over the traded support.
/// `bandwidth`: explicit value in strike units, or None for the default rule.
pub fn extract_rnd(slice: &SurfaceSlice, bandwidth: Option<f64>, mult: f64) -> Result<DensityCurve> {
    extract_rnd_on(slice, bandwidth, mult, GRID_POINTS)
}

/// As [`extract_rnd`] on a caller-chosen grid size (≥ 20).
pub fn extract_rnd_on(
    slice: &SurfaceSlice,
    bandwidth: Option<f64>,
    mult: f64,
    n_points: usize,
) -> Result<DensityCurve> {
    if n_points < 20 {
        return Err(Error::Parameter(format!("grid needs >= 20 points, got {n_points}")));
    }
    slice.validate()?;
    if slice.strikes.len() < 5 {
        return Err(Error::Data(format!(
            "density extraction needs >= 5 strikes, got {}",
            slice.strikes.len()
        )));
    }
    let h = match bandwidth {
        Some(b) if b <= 0.0 => return Err(Error::Parameter(format!("bandwidth must be positive, got {b}"))),
        Some(b) => b,
        None => default_bandwidth(&slice.strikes, mult),
    };
    let grid = make_grid_n(&slice.strikes, n_points);
    let growth = (slice.rate * slice.maturity_years).exp();
    let mut values = Vec::with_capacity(n_points);
    let mut unsupported = Vec::with_capacity(n_points);
    for &k0 in &grid {
        match local_fit(&slice.strikes, &slice.calls, k0, h) {
            Some((_, b2)) => {
                values.push(growth * 2.0 * b2);
                unsupported.push(false);
            }
            None => {
                values.push(0.0);
                unsupported.push(true);
            }
        }
    }
    let mass = trapezoid(&grid, &values);
    Ok(DensityCurve {
        grid,
        values,
        maturity: slice.maturity_years,
        discount: 1.0 / growth,
        kind: DensityKind::RiskNeutral,
        mass,
        unsupported,
        bandwidth: h,
    })
}

/// Risk-neutral CDF on the same grid: F* = 1 + e^{rT}β₁, clamped to [0,1]
/// and made monotone by a running maximum.
pub fn rnd_cdf(slice: &SurfaceSlice, bandwidth: Option<f64>, mult: f64) -> Result<CdfCurve> {
    slice.validate()?;
    if slice.strikes.len() < 5 {
        return Err(Error::Data(format!(
            "CDF extraction needs >= 5 strikes, got {}",
            slice.strikes.len()
        )));
    }
    let h = match bandwidth {
        Some(b) if b <= 0.0 => return Err(Error::Parameter(format!("bandwidth must be positive, got {b}"))),
        Some(b) => b,
        None => default_bandwidth(&slice.strikes, mult),
    };
    let grid = make_grid(&slice.strikes);
    let growth = (slice.rate * slice.maturity_years).exp();
    let mut values = Vec::with_capacity(GRID_POINTS);
    let mut unsupported = Vec::with_capacity(GRID_POINTS);
    let mut running = 0.0_f64;
    for &k0 in &grid {
        match local_fit(&slice.strikes, &slice.calls, k0, h) {
            Some((b1, _)) => {
                let f = (1.0 + growth * b1).clamp(0.0, 1.0);
                running = running.max(f);
                values.push(running);
                unsupported.push(false);
            }
            None => {
                values.push(running);
                unsupported.push(true);
            }
        }
    }
    Ok(CdfCurve { grid, values, maturity: slice.maturity_years, unsupported })
}

/// Moments of a density curve after renormalizing its grid mass to 1.
pub fn rnd_moments(curve: &DensityCurve) -> Result<RndMoments> {
    if curve.mass <= 0.5 {
        return Err(Error::Data(format!(
            "moment computation needs mass > 0.5, got {:.4}",
            curve.mass
        )));
    }
    let w: Vec<f64> = curve.values.iter().map(|v| v / curve.mass).collect();
    let moment = |f: &dyn Fn(f64) -> f64| {
        let vals: Vec<f64> = curve.grid.iter().zip(&w).map(|(&k, &d)| f(k) * d).collect();
        trapezoid(&curve.grid, &vals)
    };
    let mean = moment(&|k| k);
    let variance = moment(&|k| (k - mean).powi(2)).max(0.0);
    let sd = variance.sqrt();
    let (skewness, excess_kurtosis) = if sd < 1e-12 * mean.abs().max(1.0) {
        (None, None)
    } else {
        (
            Some(moment(&|k| ((k - mean) / sd).powi(3))),
            Some(moment(&|k| ((k - mean) / sd).powi(4)) - 3.0),
        )
    };
    Ok(RndMoments {
        mean,
        variance,
        skewness,
        excess_kurtosis,
        support: (curve.grid[0], curve.grid[curve.grid.len() - 1]),
    })
}

/// Per-strike internal-consistency residual of the smile slope:
/// dIV/dK (finite differences on observed IVs) minus the chain-rule
/// prediction −e^{−rT}(1−F*)·(∂IV/∂C) + ∂IV/∂K, with the partials from the
/// Black–Scholes vega identity. None where an IV is unavailable.
pub fn iv_slope_diagnostic(slice: &SurfaceSlice, cdf: &CdfCurve) -> Result<Vec<Option<f64>>> {
    slice.validate()?;
    let n = slice.strikes.len();
    let ivs: Vec<Option<f64>> = slice
        .strikes
        .iter()
        .zip(&slice.calls)
        .map(|(&k, &c)| {
            implied_vol(
                c,
                &BsInputs {
                    forward: slice.forward,
                    strike: k,
                    rate: slice.rate,
                    maturity: slice.maturity_years,
                    vol: 0.0,
                    is_call: true,
                },
            )
            .ok()
        })
        .collect();

    let interp_cdf = |k: f64| -> f64 {
        let i = cdf.grid.partition_point(|&x| x < k).clamp(1, cdf.grid.len() - 1);
        let (g0, g1) = (cdf.grid[i - 1], cdf.grid[i]);
        let w = ((k - g0) / (g1 - g0)).clamp(0.0, 1.0);
        (1.0 - w) * cdf.values[i - 1] + w * cdf.values[i]
    };

    let df = (-slice.rate * slice.maturity_years).exp();
    let mut out = vec![None; n];
    for i in 1..n - 1 {
        let (Some(iv_m), Some(iv_0), Some(iv_p)) = (ivs[i - 1], ivs[i], ivs[i + 1]) else {
            continue;
        };
        let k = slice.strikes[i];
        // observed total smile slope
        let div_dk = (iv_p - iv_m) / (slice.strikes[i + 1] - slice.strikes[i - 1]);
        let inp = BsInputs {
            forward: slice.forward,
            strike: k,
            rate: slice.rate,
            maturity: slice.maturity_years,
            vol: iv_0,
            is_call: true,
        };
        let vega = bs_vega(&inp);
        if vega < 1e-12 {
            continue;
        }
        let sqrt_t = slice.maturity_years.sqrt();
        let d2 = ((slice.forward / k).ln() - 0.5 * iv_0 * iv_0 * slice.maturity_years) / (iv_0 * sqrt_t);
        // partials at fixed price: dC/dK = -df*N(d2), so dIV/dK|_C = df*N(d2)/vega
        let div_dk_partial = df * norm_cdf(d2) / vega;
        let div_dc = 1.0 / vega;
        let predicted = -df * (1.0 - interp_cdf(k)) * div_dc + div_dk_partial;
        out[i] = Some(div_dk - predicted);
    }
    Ok(out)
}

/// Closed-form lognormal density of S_T with E[S_T]=forward, log-variance
/// σ²T (oracle helper, also used by physical-density tests).
pub fn lognormal_density(s: f64, forward: f64, sigma: f64, t: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let v = sigma * t.sqrt();
    let mu = forward.ln() - 0.5 * v * v;
    norm_pdf(((s.ln() - mu) / v).abs()) / (s * v)
}
