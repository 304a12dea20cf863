//! Least-squares projection of observed call-price slices onto the
//! per-maturity no-arbitrage cone, plus arbitrage diagnostics.
//!
//! Constraints on an ascending strike grid K_1 < … < K_n with discounted
//! forward df·F (df = e^{−rT}):
//!   bounds      max(0, df·(F−K_i)) ≤ C_i ≤ df·F
//!   call spread −df ≤ (C_{i+1}−C_i)/(K_{i+1}−K_i) ≤ 0
//!   butterfly   slope(K_i,K_{i+1}) ≥ slope(K_{i−1},K_i)  (convexity on an
//!               unequal grid, stated as second differences of slopes)
//! Calendar-spread consistency across maturities is reported only; the
//! projection is solved slice by slice.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::qp::project_polyhedron;
use crate::quotes::{SurfaceSlice, TreatmentCalendar};

/// Flag tolerance for diagnostics; the QP itself enforces 1e-10 feasibility.
pub const CHECK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub butterfly: usize,
    pub call_spread: usize,
    pub bounds: usize,
    pub calendar: usize,
}

impl ViolationCounts {
    pub fn total_per_maturity(&self) -> usize {
        self.butterfly + self.call_spread + self.bounds
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViolationReport {
    pub counts: ViolationCounts,
    /// Indices of strikes involved in a butterfly violation (middle strike).
    pub butterfly_at: Vec<usize>,
    /// Left index of each violating spread interval.
    pub call_spread_at: Vec<usize>,
    pub bounds_at: Vec<usize>,
}

/// Linearized per-maturity constraint system `A x >= b` for a slice.
fn constraint_system(slice: &SurfaceSlice) -> (DMatrix<f64>, DVector<f64>) {
    let n = slice.strikes.len();
    let df = (-slice.rate * slice.maturity_years).exp();
    let f = slice.forward;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut push = |coeffs: Vec<(usize, f64)>, rhs: f64| {
        let mut row = vec![0.0; n];
        for (j, v) in coeffs {
            row[j] = v;
        }
        rows.push(row);
        b.push(rhs);
    };

    for i in 0..n {
        // lower bounds: C_i >= 0 and C_i >= df (F - K_i)
        push(vec![(i, 1.0)], 0.0);
        push(vec![(i, 1.0)], df * (f - slice.strikes[i]));
        // upper bound: -C_i >= -df F
        push(vec![(i, -1.0)], -df * f);
    }
    for i in 0..n - 1 {
        let dk = slice.strikes[i + 1] - slice.strikes[i];
        // slope <= 0:  (C_i - C_{i+1})/dK >= 0
        push(vec![(i, 1.0 / dk), (i + 1, -1.0 / dk)], 0.0);
        // slope >= -df: (C_{i+1} - C_i)/dK >= -df
        push(vec![(i + 1, 1.0 / dk), (i, -1.0 / dk)], -df);
    }
    for i in 1..n - 1 {
        let dl = slice.strikes[i] - slice.strikes[i - 1];
        let dr = slice.strikes[i + 1] - slice.strikes[i];
        // slope(K_i, K_{i+1}) - slope(K_{i-1}, K_i) >= 0
        push(
            vec![
                (i + 1, 1.0 / dr),
                (i, -1.0 / dr - 1.0 / dl),
                (i - 1, 1.0 / dl),
            ],
            0.0,
        );
    }

    let m = rows.len();
    let a = DMatrix::from_fn(m, n, |r, c| rows[r][c]);
    (a, DVector::from_vec(b))
}

/// Per-maturity arbitrage diagnostics for one slice, plus a calendar check
/// against neighboring maturities of the same name/date at matched forward
/// moneyness (undiscounted prices normalized by the forward must be
/// nondecreasing in maturity).
pub fn check_arbitrage(slice: &SurfaceSlice, neighbors: &[&SurfaceSlice]) -> Result<ViolationReport> {
    slice.validate()?;
    let n = slice.strikes.len();
    if n < 3 {
        return Err(Error::Data(format!("butterfly check needs >= 3 strikes, got {n}")));
    }
    let df = (-slice.rate * slice.maturity_years).exp();
    let f = slice.forward;
    let k = &slice.strikes;
    let c = &slice.calls;

    let mut rep = ViolationReport {
        counts: ViolationCounts::default(),
        butterfly_at: Vec::new(),
        call_spread_at: Vec::new(),
        bounds_at: Vec::new(),
    };

    for i in 0..n {
        let lower = (df * (f - k[i])).max(0.0);
        if c[i] < lower - CHECK_TOL || c[i] > df * f + CHECK_TOL {
            rep.counts.bounds += 1;
            rep.bounds_at.push(i);
        }
    }
    for i in 0..n - 1 {
        let slope = (c[i + 1] - c[i]) / (k[i + 1] - k[i]);
        if slope > CHECK_TOL || slope < -df - CHECK_TOL {
            rep.counts.call_spread += 1;
            rep.call_spread_at.push(i);
        }
    }
    for i in 1..n - 1 {
        let sl = (c[i] - c[i - 1]) / (k[i] - k[i - 1]);
        let sr = (c[i + 1] - c[i]) / (k[i + 1] - k[i]);
        if sr < sl - CHECK_TOL {
            rep.counts.butterfly += 1;
            rep.butterfly_at.push(i);
        }
    }

    // calendar: undiscounted price / forward at matched moneyness must be
    // nondecreasing in maturity
    let norm_price = |s: &SurfaceSlice, m: f64| -> Option<f64> {
        let kk = m * s.forward;
        let i = s.strikes.partition_point(|&x| x < kk);
        if i == 0 || i >= s.strikes.len() {
            return None;
        }
        let (k0, k1) = (s.strikes[i - 1], s.strikes[i]);
        let w = (kk - k0) / (k1 - k0);
        let price = (1.0 - w) * s.calls[i - 1] + w * s.calls[i];
        Some(price * (s.rate * s.maturity_years).exp() / s.forward)
    };
    for nb in neighbors {
        for i in 0..n {
            let m = k[i] / f;
            if let (Some(a), Some(b)) = (norm_price(slice, m), norm_price(nb, m)) {
                let (short, long) = if slice.maturity_years <= nb.maturity_years { (a, b) } else { (b, a) };
                if long < short - CHECK_TOL {
                    rep.counts.calendar += 1;
                }
            }
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairedSlice {
    pub slice: SurfaceSlice,
    /// repaired − observed, per strike.
    pub delta_prices: Vec<f64>,
    pub violations_before: ViolationCounts,
    pub max_abs_adjust: f64,
}

/// Least-squares projection of a slice onto the per-maturity no-arbitrage
/// constraints. Feasible inputs pass through unchanged.
pub fn repair_slice(slice: &SurfaceSlice) -> Result<RepairedSlice> {
    slice.validate()?;
    if slice.strikes.len() < 3 {
        return Err(Error::Data(format!(
            "repair needs >= 3 strikes, got {}",
            slice.strikes.len()
        )));
    }
    let before = check_arbitrage(slice, &[])?;
    let (a, b) = constraint_system(slice);
    let c = DVector::from_vec(slice.calls.clone());
    let proj = project_polyhedron(&a, &b, &c).map_err(|e| {
        Error::Numeric(format!(
            "repair projection failed for {} {} {}: {e}",
            slice.ticker, slice.quote_date, slice.expiry
        ))
    })?;

    let delta: Vec<f64> = proj.x.iter().zip(&slice.calls).map(|(r, o)| r - o).collect();
    let max_abs = delta.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    let mut repaired = slice.clone();
    repaired.calls = proj.x.clone();
    Ok(RepairedSlice {
        slice: repaired,
        delta_prices: delta,
        violations_before: before.counts,
        max_abs_adjust: max_abs,
    })
}

/// One row of the repair-gap panel, joinable to the treatment calendar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapRecord {
    pub ticker: String,
    pub date: chrono::NaiveDate,
    pub expiry: chrono::NaiveDate,
    pub strike: f64,
    pub delta: f64,
    pub abs_delta: f64,
    /// log|ΔC|; missing for exact zeros rather than −∞.
    pub log_abs_delta: Option<f64>,
    pub treated_now: Option<bool>,
    pub after_first: Option<bool>,
    pub after_last: Option<bool>,
}

/// Long-format adjustment gaps for every strike of every repaired slice,
/// annotated with treatment flags when the calendar covers the observation.
pub fn arbitrage_gap_panel(repaired: &[RepairedSlice], treatment: &[TreatmentCalendar]) -> Vec<GapRecord> {
    repaired
        .iter()
        .flat_map(|r| {
            let flags = treatment
                .iter()
                .find(|t| t.ticker == r.slice.ticker && t.date == r.slice.quote_date);
            r.slice
                .strikes
                .iter()
                .zip(&r.delta_prices)
                .map(move |(&k, &d)| GapRecord {
                    ticker: r.slice.ticker.clone(),
                    date: r.slice.quote_date,
                    expiry: r.slice.expiry,
                    strike: k,
                    delta: d,
                    abs_delta: d.abs(),
                    log_abs_delta: if d == 0.0 { None } else { Some(d.abs().ln()) },
                    treated_now: flags.map(|t| t.treated_now),
                    after_first: flags.map(|t| t.after_first),
                    after_last: flags.map(|t| t.after_last),
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Exhaustive active-set enumeration oracle: minimize ‖x−c‖ over every
/// equality-restricted subset of the constraint rows, keeping primal-feasible
/// candidates. `feasible_hint` must satisfy the constraints (verified here);
/// it yields the rigorous pruning radius ‖hint−c‖ — any optimum lies within
/// that distance of c, so rows with larger normalized slack at c can never be
/// active. Exponential in the surviving rows; intended for ≤ 7 strikes.
pub fn repair_brute_force(slice: &SurfaceSlice, feasible_hint: &[f64]) -> Option<Vec<f64>> {
    let (a, b) = constraint_system(slice);
    let c = DVector::from_vec(slice.calls.clone());
    let m = a.nrows();
    let n = c.len();
    let hint = DVector::from_vec(feasible_hint.to_vec());
    if hint.len() != n {
        return None;
    }
    let av_hint = &a * &hint;
    if (0..m).any(|r| av_hint[r] < b[r] - 1e-9) {
        return None; // hint not feasible; the radius bound would be invalid
    }
    let radius = (&hint - &c).norm();
    let av_c = &a * &c;
    let pool: Vec<usize> = (0..m)
        .filter(|&r| {
            let row_norm = a.row(r).norm();
            (av_c[r] - b[r]) / row_norm <= radius + 1e-7
        })
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut subset: Vec<usize> = Vec::new();

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        c: &DVector<f64>,
        pool: &[usize],
        start: usize,
        max_active: usize,
        subset: &mut Vec<usize>,
        best: &mut Option<(f64, Vec<f64>)>,
    ) {
        let rows = subset.len();
        let a_s = DMatrix::from_fn(rows, c.len(), |r, j| a[(subset[r], j)]);
        let b_s = DVector::from_fn(rows, |r, _| b[subset[r]]);
        if let Some(x) = crate::math::qp::project_equality(&a_s, &b_s, c) {
            let xv = DVector::from_vec(x.clone());
            let ax = a * &xv;
            let feasible = (0..a.nrows()).all(|r| ax[r] >= b[r] - 1e-9);
            if feasible {
                let obj = (&xv - c).norm_squared();
                if best.as_ref().map_or(true, |(bo, _)| obj < *bo) {
                    *best = Some((obj, x));
                }
            }
        }
        if subset.len() == max_active {
            return;
        }
        for i in start..pool.len() {
            subset.push(pool[i]);
            recurse(a, b, c, pool, i + 1, max_active, subset, best);
            subset.pop();
        }
    }

    recurse(&a, &b, &c, &pool, 0, n, &mut subset, &mut best);
    best.map(|(_, x)| x)
}
