//! Gaussian quasi-MLE for the market GARCH(1,1) and the wildfire-augmented
//! stock model, plus forward simulation to a physical density.
//!
//! Market:  R_t = μ + a_t,            ς_t² = ω + ζ ς²_{t−1} + ξ a²_{t−1}
//! Stock:   r_t = α + β R_t + δ W_{t−1} + ε_t,
//!          σ_t² = ω + ζ σ²_{t−1} + ξ ε²_{t−1} + ρ_v ς_t² + γ_v W_{t−1}
//! Estimation is two-step: the market fit conditions the stock fit. The
//! optimizer works in an unconstrained reparameterization (log ω, logistic
//! simplex over (ζ, ξ)); standard errors are robust sandwich estimates in
//! the original parameter space. With n_lags > 1 the wildfire regressor is
//! the indicator of any exposure within the last n_lags days.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::optim::{bfgs, num_hessian};
use crate::math::{gaussian_kde, trapezoid};
use crate::quotes::TreatmentCalendar;
use crate::rnd::{DensityCurve, DensityKind};

pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarketGarchParams {
    pub mu: f64,
    pub omega: f64,
    pub zeta: f64,
    pub xi: f64,
}

impl MarketGarchParams {
    pub fn validate(&self) -> Result<()> {
        if self.omega <= 0.0 {
            return Err(Error::Parameter("omega must be positive".into()));
        }
        if self.zeta < 0.0 || self.xi < 0.0 || self.zeta + self.xi >= 1.0 {
            return Err(Error::Parameter("need zeta, xi >= 0 and zeta + xi < 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GarchWildfireParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub omega: f64,
    pub zeta: f64,
    pub xi: f64,
    pub rho_vol: f64,
    pub gamma_vol: f64,
    pub n_lags: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub ticker: String,
    pub dates: Vec<NaiveDate>,
    pub log_returns: Vec<f64>,
    pub wildfire_flags: Vec<bool>,
    pub market_returns: Vec<f64>,
}

impl ReturnSeries {
    pub fn validate(&self) -> Result<()> {
        let n = self.log_returns.len();
        if self.dates.len() != n || self.wildfire_flags.len() != n || self.market_returns.len() != n {
            return Err(Error::Data("return series vectors must be aligned".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketFit {
    pub params: MarketGarchParams,
    pub loglik: f64,
    pub loglik_start: f64,
    /// Robust (sandwich) SEs ordered (mu, omega, zeta, xi).
    pub se: [f64; 4],
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WildfireFit {
    pub params: GarchWildfireParams,
    pub loglik: f64,
    pub loglik_start: f64,
    /// Robust SEs ordered (alpha, beta, delta, omega, zeta, xi, rho_vol,
    /// gamma_vol); delta/gamma_vol entries are NaN when unidentified.
    pub se: [f64; 8],
    pub grad_norm: f64,
    /// True when the sample has no wildfire days: delta and gamma_vol are
    /// pinned at zero.
    pub unidentified: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let c = p.clamp(1e-12, 1.0 - 1e-12);
    (c / (1.0 - c)).ln()
}

/// (zeta, xi) from the stationarity-respecting simplex coordinates.
fn simplex_decode(z_persist: f64, z_split: f64) -> (f64, f64) {
    let p = sigmoid(z_persist); // zeta + xi in (0,1)
    let s = sigmoid(z_split);
    (p * s, p * (1.0 - s))
}

fn simplex_encode(zeta: f64, xi: f64) -> (f64, f64) {
    let p = (zeta + xi).clamp(1e-10, 1.0 - 1e-10);
    (logit(p), logit((zeta / p).clamp(1e-10, 1.0 - 1e-10)))
}

/// Per-observation Gaussian log-likelihood terms of the market recursion;
/// `None` components never occur (floored variance), the penalty counts
/// floor activations so the optimizer backs away.
fn market_loglik_terms(p: &MarketGarchParams, returns: &[f64], out: &mut Vec<f64>) -> f64 {
    let n = returns.len() as f64;
    let mean: f64 = returns.iter().sum::<f64>() / n;
    let sample_var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let mut var = sample_var.max(VARIANCE_FLOOR);
    let mut penalty = 0.0;
    out.clear();
    let mut prev_a2 = var; // E[a²] stand-in for the pre-sample innovation
    for &r in returns {
        let raw = p.omega + p.zeta * var + p.xi * prev_a2;
        var = if raw < VARIANCE_FLOOR {
            penalty += 1.0 + raw.abs();
            VARIANCE_FLOOR
        } else {
            raw
        };
        let a = r - p.mu;
        out.push(-0.5 * ((2.0 * std::f64::consts::PI).ln() + var.ln() + a * a / var));
        prev_a2 = a * a;
    }
    penalty
}

fn market_loglik(p: &MarketGarchParams, returns: &[f64]) -> f64 {
    let mut terms = Vec::new();
    let penalty = market_loglik_terms(p, returns, &mut terms);
    terms.iter().sum::<f64>() - 1e3 * penalty
}

fn market_decode(raw: &[f64]) -> MarketGarchParams {
    let (zeta, xi) = simplex_decode(raw[2], raw[3]);
    MarketGarchParams { mu: raw[0], omega: raw[1].exp(), zeta, xi }
}

/// Sandwich covariance from per-observation scores and the (negative)
/// total-loglik Hessian, both numeric in the original parameter space.
fn sandwich_se<F>(theta: &[f64], terms_at: F, n_obs: usize) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let k = theta.len();
    // per-coordinate scales keep finite differences sane for parameters
    // spanning many orders of magnitude (omega ~ 1e-6 vs beta ~ 1)
    let scales: Vec<f64> = theta.iter().map(|t| t.abs().max(1e-6)).collect();

    // per-observation scores by central differences
    let mut scores = vec![vec![0.0; k]; n_obs];
    for j in 0..k {
        let h = 1e-4 * scales[j];
        let mut tp = theta.to_vec();
        tp[j] += h;
        let mut tm = theta.to_vec();
        tm[j] -= h;
        let lp = terms_at(&tp);
        let lm = terms_at(&tm);
        for t in 0..n_obs {
            scores[t][j] = (lp[t] - lm[t]) / (2.0 * h);
        }
    }
    // Hessian in the scaled space u (theta = theta0 + u .* scales), mapped back
    let total_u = |u: &[f64]| {
        let th: Vec<f64> = theta.iter().zip(&scales).zip(u).map(|((t, s), ui)| t + s * ui).collect();
        terms_at(&th).iter().sum::<f64>()
    };
    let hess_u = num_hessian(&total_u, &vec![0.0; k], 1e-4);
    let s_inv = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        k,
        scales.iter().map(|s| 1.0 / s),
    ));
    let hess = &s_inv * hess_u * &s_inv;

    let mut opg = nalgebra::DMatrix::zeros(k, k);
    for s in &scores {
        let v = nalgebra::DVector::from_row_slice(s);
        opg += &v * v.transpose();
    }
    let h_mat = -hess;
    match h_mat.clone().try_inverse() {
        Some(hinv) => {
            let cov = &hinv * opg * &hinv;
            (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect()
        }
        None => vec![f64::NAN; k],
    }
}

/// Gaussian quasi-MLE of the market GARCH(1,1).
pub fn fit_market_garch(returns: &[f64]) -> Result<MarketFit> {
    if returns.len() < 250 {
        return Err(Error::Data(format!("need >= 250 observations, got {}", returns.len())));
    }
    let n = returns.len() as f64;
    let mean: f64 = returns.iter().sum::<f64>() / n;
    let sample_var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    if sample_var < 1e-18 {
        return Err(Error::Data("constant return series: zero variance".into()));
    }

    // standardize to unit variance: keeps the optimizer's coordinates and
    // curvatures O(1) regardless of the return scale
    let scale = sample_var.sqrt();
    let std_rets: Vec<f64> = returns.iter().map(|r| r / scale).collect();

    let (z1, z2) = simplex_encode(0.8, 0.1);
    let start = vec![mean / scale, 0.1_f64.ln(), z1, z2];
    // mean loglik so the gradient tolerance is scale-free
    let neg = |raw: &[f64]| -market_loglik(&market_decode(raw), &std_rets) / n;
    let loglik_start = -neg(&start) * n - n * scale.ln();
    let opt = bfgs(&neg, &start, 1e-6, 600);
    if !opt.converged {
        return Err(Error::Numeric(format!(
            "market GARCH did not converge: gradient norm {:.3e} after {} iterations (best loglik {:.6})",
            opt.grad_norm,
            opt.iterations,
            -opt.fval * n - n * scale.ln()
        )));
    }
    let std_params = market_decode(&opt.x);
    let params = MarketGarchParams {
        mu: std_params.mu * scale,
        omega: std_params.omega * scale * scale,
        zeta: std_params.zeta,
        xi: std_params.xi,
    };
    params.validate()?;

    let theta = [params.mu, params.omega, params.zeta, params.xi];
    let terms_at = |th: &[f64]| {
        let p = MarketGarchParams { mu: th[0], omega: th[1], zeta: th[2], xi: th[3] };
        let mut t = Vec::new();
        market_loglik_terms(&p, returns, &mut t);
        t
    };
    let se = sandwich_se(&theta, terms_at, returns.len());
    Ok(MarketFit {
        params,
        loglik: -opt.fval * n - n * scale.ln(),
        loglik_start,
        se: [se[0], se[1], se[2], se[3]],
        grad_norm: opt.grad_norm,
    })
}

/// Market conditional-variance path implied by a fitted market model
/// (inputs to the stock equation).
pub fn market_variance_path(p: &MarketGarchParams, market_returns: &[f64]) -> Vec<f64> {
    let n = market_returns.len() as f64;
    let mean: f64 = market_returns.iter().sum::<f64>() / n;
    let sample_var = market_returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>().max(VARIANCE_FLOOR) / n;
    let mut var = sample_var;
    let mut prev_a2 = var;
    let mut out = Vec::with_capacity(market_returns.len());
    for &r in market_returns {
        var = (p.omega + p.zeta * var + p.xi * prev_a2).max(VARIANCE_FLOOR);
        out.push(var);
        let a = r - p.mu;
        prev_a2 = a * a;
    }
    out
}

/// Lagged any-exposure indicator over the last `n_lags` days.
fn wildfire_lag(flags: &[bool], t: usize, n_lags: usize) -> f64 {
    let lo = t.saturating_sub(n_lags);
    if flags[lo..t].iter().any(|&w| w) {
        1.0
    } else {
        0.0
    }
}

fn stock_loglik_terms(
    p: &GarchWildfireParams,
    series: &ReturnSeries,
    mkt_var: &[f64],
    out: &mut Vec<f64>,
) -> f64 {
    let rets = &series.log_returns;
    let n = rets.len() as f64;
    let mean: f64 = rets.iter().sum::<f64>() / n;
    let sample_var = rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>().max(VARIANCE_FLOOR) / n;
    let mut var = sample_var;
    let mut prev_e2 = var;
    let mut penalty = 0.0;
    out.clear();
    for t in 0..rets.len() {
        let w = wildfire_lag(&series.wildfire_flags, t, p.n_lags);
        let raw = p.omega + p.zeta * var + p.xi * prev_e2 + p.rho_vol * mkt_var[t] + p.gamma_vol * w;
        var = if raw < VARIANCE_FLOOR {
            penalty += 1.0 + raw.abs();
            VARIANCE_FLOOR
        } else {
            raw
        };
        let e = rets[t] - p.alpha - p.beta * series.market_returns[t] - p.delta * w;
        out.push(-0.5 * ((2.0 * std::f64::consts::PI).ln() + var.ln() + e * e / var));
        prev_e2 = e * e;
    }
    penalty
}

fn stock_decode(raw: &[f64], n_lags: usize, identified: bool) -> GarchWildfireParams {
    let (zeta, xi) = simplex_decode(raw[4], raw[5]);
    GarchWildfireParams {
        alpha: raw[0],
        beta: raw[1],
        delta: if identified { raw[2] } else { 0.0 },
        omega: raw[3].exp(),
        zeta,
        xi,
        rho_vol: raw[6].exp(),
        gamma_vol: if identified { raw[7] } else { 0.0 },
        n_lags,
    }
}

/// Two-step Gaussian quasi-MLE of the wildfire-augmented stock equation,
/// conditioning on a fitted market model.
pub fn fit_garch_wildfire(
    series: &ReturnSeries,
    market: &MarketGarchParams,
    n_lags: usize,
) -> Result<WildfireFit> {
    series.validate()?;
    market.validate()?;
    if series.log_returns.len() < 250 {
        return Err(Error::Data(format!(
            "need >= 250 observations, got {}",
            series.log_returns.len()
        )));
    }
    if n_lags == 0 {
        return Err(Error::Parameter("n_lags must be >= 1".into()));
    }
    let identified = series.wildfire_flags.iter().any(|&w| w);
    let rets = &series.log_returns;
    let n = rets.len() as f64;
    let mean: f64 = rets.iter().sum::<f64>() / n;
    let sample_var = rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>().max(VARIANCE_FLOOR) / n;
    if sample_var < 1e-18 {
        return Err(Error::Data("constant return series: zero variance".into()));
    }

    // standardize stock AND market returns by the stock scale (beta and
    // rho_vol are then unchanged; the other parameters map back by powers
    // of the scale)
    let scale = sample_var.sqrt();
    let std_series = ReturnSeries {
        ticker: series.ticker.clone(),
        dates: series.dates.clone(),
        log_returns: rets.iter().map(|r| r / scale).collect(),
        wildfire_flags: series.wildfire_flags.clone(),
        market_returns: series.market_returns.iter().map(|r| r / scale).collect(),
    };
    let std_market = MarketGarchParams {
        mu: market.mu / scale,
        omega: market.omega / (scale * scale),
        zeta: market.zeta,
        xi: market.xi,
    };
    let std_mkt_var = market_variance_path(&std_market, &std_series.market_returns);

    let (z1, z2) = simplex_encode(0.7, 0.1);
    let start = vec![mean / scale, 0.5, 0.0, 0.05_f64.ln(), z1, z2, (0.05_f64).ln(), 0.0];
    let neg = |raw: &[f64]| {
        let p = stock_decode(raw, n_lags, identified);
        let mut terms = Vec::new();
        let penalty = stock_loglik_terms(&p, &std_series, &std_mkt_var, &mut terms);
        -(terms.iter().sum::<f64>() - 1e3 * penalty) / n
    };
    let loglik_start = -neg(&start) * n - n * scale.ln();
    let opt = bfgs(&neg, &start, 1e-6, 800);
    if !opt.converged {
        return Err(Error::Numeric(format!(
            "wildfire GARCH did not converge: gradient norm {:.3e} after {} iterations (best loglik {:.6})",
            opt.grad_norm,
            opt.iterations,
            -opt.fval * n - n * scale.ln()
        )));
    }
    let sp = stock_decode(&opt.x, n_lags, identified);
    let params = GarchWildfireParams {
        alpha: sp.alpha * scale,
        beta: sp.beta,
        delta: sp.delta * scale,
        omega: sp.omega * scale * scale,
        zeta: sp.zeta,
        xi: sp.xi,
        rho_vol: sp.rho_vol,
        gamma_vol: sp.gamma_vol * scale * scale,
        n_lags,
    };
    let mkt_var = market_variance_path(market, &series.market_returns);

    // sandwich SEs in original space; unidentified coordinates are dropped
    // from differentiation and reported as NaN
    let full = [
        params.alpha,
        params.beta,
        params.delta,
        params.omega,
        params.zeta,
        params.xi,
        params.rho_vol,
        params.gamma_vol,
    ];
    let free_idx: Vec<usize> = if identified {
        (0..8).collect()
    } else {
        vec![0, 1, 3, 4, 5, 6]
    };
    let theta: Vec<f64> = free_idx.iter().map(|&i| full[i]).collect();
    let terms_at = |th: &[f64]| {
        let mut v = full;
        for (j, &i) in free_idx.iter().enumerate() {
            v[i] = th[j];
        }
        let p = GarchWildfireParams {
            alpha: v[0],
            beta: v[1],
            delta: v[2],
            omega: v[3],
            zeta: v[4],
            xi: v[5],
            rho_vol: v[6],
            gamma_vol: v[7],
            n_lags,
        };
        let mut t = Vec::new();
        stock_loglik_terms(&p, series, &mkt_var, &mut t);
        t
    };
    let se_free = sandwich_se(&theta, terms_at, rets.len());
    let mut se = [f64::NAN; 8];
    for (j, &i) in free_idx.iter().enumerate() {
        se[i] = se_free[j];
    }

    Ok(WildfireFit {
        params,
        loglik: -opt.fval * n - n * scale.ln(),
        loglik_start,
        se,
        grad_norm: opt.grad_norm,
        unidentified: !identified,
    })
}

/// Initial conditions for a forward simulation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ForecastState {
    pub spot: f64,
    pub market_variance: f64,
    pub stock_variance: f64,
    pub last_market_innovation_sq: f64,
    pub last_stock_innovation_sq: f64,
    pub wildfire_yesterday: bool,
}

/// Simulate the coupled market/stock recursions `horizon_days` forward with
/// Bernoulli(hazard) wildfire arrivals, and smooth terminal prices onto the
/// supplied grid with a Gaussian kernel density.
#[allow(clippy::too_many_arguments)]
pub fn forecast_density(
    market: &MarketGarchParams,
    stock: &GarchWildfireParams,
    state: &ForecastState,
    horizon_days: usize,
    n_paths: usize,
    hazard: f64,
    grid: &[f64],
    seed: u64,
) -> Result<DensityCurve> {
    if !(0.0..=1.0).contains(&hazard) {
        return Err(Error::Parameter(format!("hazard must lie in [0,1], got {hazard}")));
    }
    if n_paths < 10_000 {
        return Err(Error::Parameter(format!("need n_paths >= 1e4, got {n_paths}")));
    }
    if horizon_days == 0 {
        return Err(Error::Parameter("horizon must be >= 1 day".into()));
    }
    market.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terminal = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let mut mvar = state.market_variance;
        let mut svar = state.stock_variance;
        let mut ma2 = state.last_market_innovation_sq;
        let mut se2 = state.last_stock_innovation_sq;
        let mut w_prev = if state.wildfire_yesterday { 1.0 } else { 0.0 };
        let mut logp = state.spot.ln();
        for _ in 0..horizon_days {
            mvar = (market.omega + market.zeta * mvar + market.xi * ma2).max(VARIANCE_FLOOR);
            let zm: f64 = rng.sample(StandardNormal);
            let am = mvar.sqrt() * zm;
            let r_mkt = market.mu + am;

            svar = (stock.omega + stock.zeta * svar + stock.xi * se2 + stock.rho_vol * mvar
                + stock.gamma_vol * w_prev)
                .max(VARIANCE_FLOOR);
            let zs: f64 = rng.sample(StandardNormal);
            let es = svar.sqrt() * zs;
            let ret = stock.alpha + stock.beta * r_mkt + stock.delta * w_prev + es;
            logp += ret;

            ma2 = am * am;
            se2 = es * es;
            w_prev = if rng.gen::<f64>() < hazard { 1.0 } else { 0.0 };
        }
        terminal.push(logp.exp());
    }

    let values = gaussian_kde(&terminal, grid, None);
    let mass = trapezoid(grid, &values);
    Ok(DensityCurve {
        grid: grid.to_vec(),
        values,
        maturity: horizon_days as f64 / 365.0,
        discount: 1.0,
        kind: DensityKind::Physical,
        mass,
        unsupported: vec![false; grid.len()],
        bandwidth: f64::NAN,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HazardEstimate {
    pub hazard: f64,
    pub treated_days: usize,
    pub total_days: usize,
    /// True when the calendar has no days for the ticker.
    pub degenerate: bool,
}

/// Laplace-smoothed daily wildfire probability for one ticker.
pub fn wildfire_hazard(calendar: &[TreatmentCalendar], ticker: &str) -> HazardEstimate {
    let days: Vec<&TreatmentCalendar> = calendar.iter().filter(|c| c.ticker == ticker).collect();
    let total = days.len();
    let treated = days.iter().filter(|c| c.treated_now).count();
    HazardEstimate {
        hazard: (treated as f64 + 1.0) / (total as f64 + 2.0),
        treated_days: treated,
        total_days: total,
        degenerate: total == 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::Distribution;

    fn simulate_market(p: &MarketGarchParams, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut var = p.omega / (1.0 - p.zeta - p.xi);
        let mut prev_a2 = var;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            var = p.omega + p.zeta * var + p.xi * prev_a2;
            let a = var.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            out.push(p.mu + a);
            prev_a2 = a * a;
        }
        out
    }

    #[test]
    fn market_recovery_within_3_se() {
        let truth = MarketGarchParams { mu: 3e-4, omega: 1e-6, zeta: 0.9, xi: 0.05 };
        let rets = simulate_market(&truth, 20_000, 1);
        let fit = fit_market_garch(&rets).unwrap();
        let est = [fit.params.mu, fit.params.omega, fit.params.zeta, fit.params.xi];
        let tru = [truth.mu, truth.omega, truth.zeta, truth.xi];
        for i in 0..4 {
            assert!(
                (est[i] - tru[i]).abs() <= 3.0 * fit.se[i],
                "param {i}: est {} true {} se {}",
                est[i],
                tru[i],
                fit.se[i]
            );
        }
        assert!(fit.loglik >= fit.loglik_start);
    }

    #[test]
    fn iid_data_degenerates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sd = 0.01_f64;
        let rets: Vec<f64> = (0..5000)
            .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let fit = fit_market_garch(&rets).unwrap();
        assert!(fit.params.zeta + fit.params.xi < 0.9, "persistence {}", fit.params.zeta + fit.params.xi);
        // iid-normal loglik at the sample moments
        let n = rets.len() as f64;
        let mean = rets.iter().sum::<f64>() / n;
        let var = rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let iid_ll = -0.5 * n * ((2.0 * std::f64::consts::PI).ln() + var.ln() + 1.0);
        assert!((fit.loglik - iid_ll).abs() / iid_ll.abs() < 5e-3, "{} vs {iid_ll}", fit.loglik);
    }

    #[test]
    fn constant_series_is_error() {
        let rets = vec![0.0; 1000];
        assert!(matches!(fit_market_garch(&rets), Err(Error::Data(_))));
    }

    fn simulate_stock(
        p: &GarchWildfireParams,
        market: &MarketGarchParams,
        market_rets: &[f64],
        flags: &[bool],
        seed: u64,
    ) -> Vec<f64> {
        let mkt_var = market_variance_path(market, market_rets);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uncond = p.omega / (1.0 - p.zeta - p.xi);
        let mut var = uncond;
        let mut prev_e2 = var;
        let mut out = Vec::with_capacity(market_rets.len());
        for t in 0..market_rets.len() {
            let w = wildfire_lag(flags, t, p.n_lags);
            var = (p.omega + p.zeta * var + p.xi * prev_e2 + p.rho_vol * mkt_var[t] + p.gamma_vol * w)
                .max(VARIANCE_FLOOR);
            let e = var.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            out.push(p.alpha + p.beta * market_rets[t] + p.delta * w + e);
            prev_e2 = e * e;
        }
        out
    }

    fn fire_flags(n: usize, n_fires: usize, seed: u64) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flags = vec![false; n];
        let mut placed = 0;
        while placed < n_fires {
            let i = rng.gen_range(0..n);
            if !flags[i] {
                flags[i] = true;
                placed += 1;
            }
        }
        flags
    }

    fn series_from(rets: Vec<f64>, flags: Vec<bool>, market: Vec<f64>) -> ReturnSeries {
        let n = rets.len();
        let d0 = NaiveDate::from_ymd_opt(2010, 1, 4).unwrap();
        ReturnSeries {
            ticker: "T".into(),
            dates: (0..n).map(|i| d0 + chrono::Duration::days(i as i64)).collect(),
            log_returns: rets,
            wildfire_flags: flags,
            market_returns: market,
        }
    }

    #[test]
    fn wildfire_recovery_within_3_se() {
        let mkt = MarketGarchParams { mu: 2e-4, omega: 1e-6, zeta: 0.9, xi: 0.05 };
        let truth = GarchWildfireParams {
            alpha: 1e-4,
            beta: 0.8,
            delta: -0.03,
            omega: 5e-7,
            zeta: 0.85,
            xi: 0.08,
            rho_vol: 0.05,
            gamma_vol: 5e-5,
            n_lags: 1,
        };
        let n = 20_000;
        let market_rets = simulate_market(&mkt, n, 2);
        let flags = fire_flags(n, 40, 3);
        let stock_rets = simulate_stock(&truth, &mkt, &market_rets, &flags, 4);
        let series = series_from(stock_rets, flags, market_rets);
        let fit = fit_garch_wildfire(&series, &mkt, 1).unwrap();
        assert!(!fit.unidentified);
        assert!(fit.loglik >= fit.loglik_start);
        let est = [
            fit.params.alpha,
            fit.params.beta,
            fit.params.delta,
            fit.params.omega,
            fit.params.zeta,
            fit.params.xi,
            fit.params.rho_vol,
            fit.params.gamma_vol,
        ];
        let tru = [
            truth.alpha, truth.beta, truth.delta, truth.omega, truth.zeta, truth.xi,
            truth.rho_vol, truth.gamma_vol,
        ];
        for i in 0..8 {
            assert!(
                (est[i] - tru[i]).abs() <= 3.0 * fit.se[i],
                "param {i}: est {:.5e} true {:.5e} se {:.5e}",
                est[i],
                tru[i],
                fit.se[i]
            );
        }
    }

    #[test]
    fn no_fires_is_unidentified() {
        let mkt = MarketGarchParams { mu: 2e-4, omega: 1e-6, zeta: 0.9, xi: 0.05 };
        let truth = GarchWildfireParams {
            alpha: 1e-4,
            beta: 0.8,
            delta: 0.0,
            omega: 5e-7,
            zeta: 0.85,
            xi: 0.08,
            rho_vol: 0.05,
            gamma_vol: 0.0,
            n_lags: 1,
        };
        let n = 5_000;
        let market_rets = simulate_market(&mkt, n, 5);
        let flags = vec![false; n];
        let stock_rets = simulate_stock(&truth, &mkt, &market_rets, &flags, 6);
        let series = series_from(stock_rets, flags, market_rets);
        let fit = fit_garch_wildfire(&series, &mkt, 1).unwrap();
        assert!(fit.unidentified);
        assert_eq!(fit.params.delta, 0.0);
        assert_eq!(fit.params.gamma_vol, 0.0);
        assert!(fit.se[2].is_nan() && fit.se[7].is_nan());
    }

    fn passthrough_state(spot: f64, daily_var: f64) -> ForecastState {
        ForecastState {
            spot,
            market_variance: daily_var,
            stock_variance: daily_var,
            last_market_innovation_sq: daily_var,
            last_stock_innovation_sq: daily_var,
            wildfire_yesterday: false,
        }
    }

    #[test]
    fn degenerate_forecast_matches_normal_closed_form() {
        // no dynamics at all: terminal log price is N(ln S0 + h·alpha, h·omega)
        let daily_var = 4e-4;
        let mkt = MarketGarchParams { mu: 0.0, omega: daily_var, zeta: 0.0, xi: 0.0 };
        let stock = GarchWildfireParams {
            alpha: 0.0,
            beta: 0.0,
            delta: 0.0,
            omega: daily_var,
            zeta: 0.0,
            xi: 0.0,
            rho_vol: 0.0,
            gamma_vol: 0.0,
            n_lags: 1,
        };
        let horizon = 21;
        let total_sd = (horizon as f64 * daily_var).sqrt();
        let grid: Vec<f64> = (0..200)
            .map(|i| 100.0 * (-6.0 * total_sd + 12.0 * total_sd * i as f64 / 199.0).exp())
            .collect();
        let curve = forecast_density(&mkt, &stock, &passthrough_state(100.0, daily_var), horizon, 100_000, 0.0, &grid, 9).unwrap();
        assert!(curve.mass >= 0.95, "mass {}", curve.mass);

        // KS distance between the curve's CDF and the closed form
        let mut cdf_sim = 0.0;
        let mut ks = 0.0_f64;
        for i in 1..grid.len() {
            cdf_sim += 0.5 * (curve.values[i] + curve.values[i - 1]) * (grid[i] - grid[i - 1]);
            let z = (grid[i].ln() - 100.0_f64.ln()) / total_sd;
            ks = ks.max((cdf_sim - crate::math::norm_cdf(z)).abs());
        }
        assert!(ks <= 0.01, "KS {ks}");
    }

    #[test]
    fn hazard_with_negative_jump_lowers_mean() {
        let daily_var = 4e-4;
        let mkt = MarketGarchParams { mu: 0.0, omega: daily_var, zeta: 0.0, xi: 0.0 };
        let stock = GarchWildfireParams {
            alpha: 0.0,
            beta: 0.0,
            delta: -0.05,
            omega: daily_var,
            zeta: 0.0,
            xi: 0.0,
            rho_vol: 0.0,
            gamma_vol: 0.0,
            n_lags: 1,
        };
        let grid: Vec<f64> = (0..300).map(|i| 40.0 + 0.4 * i as f64).collect();
        let state = passthrough_state(100.0, daily_var);
        let mean = |hazard: f64| {
            let c = forecast_density(&mkt, &stock, &state, 21, 50_000, hazard, &grid, 11).unwrap();
            let weighted: Vec<f64> = grid.iter().zip(&c.values).map(|(&k, &v)| k * v).collect();
            trapezoid(&grid, &weighted) / c.mass
        };
        assert!(mean(0.5) < mean(0.0) - 1.0);
    }

    #[test]
    fn forecast_deterministic_under_seed() {
        let daily_var = 4e-4;
        let mkt = MarketGarchParams { mu: 0.0, omega: daily_var, zeta: 0.3, xi: 0.1 };
        let stock = GarchWildfireParams {
            alpha: 1e-4,
            beta: 0.5,
            delta: -0.02,
            omega: daily_var,
            zeta: 0.3,
            xi: 0.1,
            rho_vol: 0.05,
            gamma_vol: 1e-5,
            n_lags: 1,
        };
        let grid: Vec<f64> = (0..100).map(|i| 60.0 + 0.8 * i as f64).collect();
        let state = passthrough_state(100.0, daily_var);
        let a = forecast_density(&mkt, &stock, &state, 10, 10_000, 0.01, &grid, 13).unwrap();
        let b = forecast_density(&mkt, &stock, &state, 10, 10_000, 0.01, &grid, 13).unwrap();
        assert_eq!(a.values, b.values);
        let c = forecast_density(&mkt, &stock, &state, 10, 10_000, 0.01, &grid, 14).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn bad_hazard_is_parameter_error() {
        let mkt = MarketGarchParams { mu: 0.0, omega: 1e-4, zeta: 0.0, xi: 0.0 };
        let stock = GarchWildfireParams {
            alpha: 0.0, beta: 0.0, delta: 0.0, omega: 1e-4, zeta: 0.0, xi: 0.0,
            rho_vol: 0.0, gamma_vol: 0.0, n_lags: 1,
        };
        let grid = vec![90.0, 100.0, 110.0];
        let err = forecast_density(&mkt, &stock, &passthrough_state(100.0, 1e-4), 5, 10_000, 1.5, &grid, 1).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn hazard_estimates() {
        let d0 = NaiveDate::from_ymd_opt(2017, 1, 2).unwrap();
        let mut cal = Vec::new();
        for i in 0..1000 {
            cal.push(TreatmentCalendar {
                ticker: "A".into(),
                date: d0 + chrono::Duration::days(i),
                treated_now: i < 5,
                after_first: true,
                after_last: false,
            });
        }
        let h = wildfire_hazard(&cal, "A");
        assert_abs_diff_eq!(h.hazard, 6.0 / 1002.0, epsilon = 1e-12);
        assert!(!h.degenerate);

        let empty = wildfire_hazard(&cal, "ZZZ");
        assert_abs_diff_eq!(empty.hazard, 0.5, epsilon = 1e-12);
        assert!(empty.degenerate);

        let all = wildfire_hazard(
            &cal.iter()
                .map(|c| TreatmentCalendar { treated_now: true, ..c.clone() })
                .collect::<Vec<_>>(),
            "A",
        );
        assert_abs_diff_eq!(all.hazard, 1001.0 / 1002.0, epsilon = 1e-12);
    }
}
