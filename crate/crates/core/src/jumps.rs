//! European option pricing under Merton lognormal jumps and Kou double
//! exponential jumps via characteristic functions, model implied-volatility
//! surfaces, and nonlinear least-squares calibration to observed IVs.
//!
//! Sign convention for Kou: downward jumps carry rate `eta1` (mean −1/η1)
//! and upward jumps rate `eta2` (mean 1/η2), with up-probability `p_up`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::quad::integrate_panel;
use crate::pricing::{bs_price, implied_vol, BsInputs};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MertonParams {
    /// Diffusion volatility.
    pub sigma: f64,
    /// Jump intensity per year.
    pub lambda_s: f64,
    /// Mean log-jump size.
    pub mu_s: f64,
    /// SD of log-jump size.
    pub sigma_s: f64,
    pub rate: f64,
    pub div_yield: f64,
}

impl MertonParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 || self.sigma_s < 0.0 || self.lambda_s < 0.0 {
            return Err(Error::Parameter("merton: sigma, sigma_s, lambda_s must be >= 0".into()));
        }
        Ok(())
    }

    /// Jump compensator κ = E[e^Y] − 1.
    pub fn kappa(&self) -> f64 {
        (self.mu_s + 0.5 * self.sigma_s * self.sigma_s).exp() - 1.0
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KouParams {
    pub sigma: f64,
    /// Jump intensity per year.
    pub lambda: f64,
    /// Probability a jump is upward.
    pub p_up: f64,
    /// Rate of downward jumps (mean down-jump −1/η1).
    pub eta1: f64,
    /// Rate of upward jumps (mean up-jump 1/η2); η2 > 1 for finite E[e^Y].
    pub eta2: f64,
    pub rate: f64,
    pub div_yield: f64,
}

impl KouParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 || self.lambda < 0.0 {
            return Err(Error::Parameter("kou: sigma, lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.p_up) {
            return Err(Error::Parameter("kou: p_up must lie in [0,1]".into()));
        }
        if self.eta1 <= 0.0 {
            return Err(Error::Parameter("kou: eta1 must be positive".into()));
        }
        if self.eta2 <= 1.0 {
            return Err(Error::Parameter("kou: eta2 must exceed 1".into()));
        }
        Ok(())
    }

    /// Jump compensator ζ = p·η2/(η2−1) + (1−p)·η1/(η1+1) − 1.
    pub fn zeta(&self) -> f64 {
        self.p_up * self.eta2 / (self.eta2 - 1.0)
            + (1.0 - self.p_up) * self.eta1 / (self.eta1 + 1.0)
            - 1.0
    }
}

/// Characteristic function of log S_T under the Merton model, parameterized
/// by the maturity-T forward so that cf(-i) = F (martingale drift).
pub fn merton_cf(u: Complex64, params: &MertonParams, forward: f64, t: f64) -> Complex64 {
    let i = Complex64::i();
    let kappa = params.kappa();
    let sig2 = params.sigma * params.sigma;
    let drift = forward.ln() - (params.lambda_s * kappa + 0.5 * sig2) * t;
    let jump = (i * u * params.mu_s - 0.5 * params.sigma_s * params.sigma_s * u * u).exp() - 1.0;
    (i * u * drift - 0.5 * sig2 * t * u * u + params.lambda_s * t * jump).exp()
}

/// Characteristic function of log S_T under the Kou model; cf(-i) = F.
pub fn kou_cf(u: Complex64, params: &KouParams, forward: f64, t: f64) -> Complex64 {
    let i = Complex64::i();
    let zeta = params.zeta();
    let sig2 = params.sigma * params.sigma;
    let drift = forward.ln() - (params.lambda * zeta + 0.5 * sig2) * t;
    let jump_cf = params.p_up * params.eta2 / (params.eta2 - i * u)
        + (1.0 - params.p_up) * params.eta1 / (params.eta1 + i * u)
        - 1.0;
    (i * u * drift - 0.5 * sig2 * t * u * u + params.lambda * t * jump_cf).exp()
}

/// Fourier inversion of a damped call transform (Carr–Madan), Gauss–Legendre
/// panels with adaptive truncation. `alpha` must keep E[S^{1+α}] finite.
pub fn price_cf<F>(cf: F, strike: f64, rate: f64, t: f64, is_call: bool, alpha: f64) -> Result<f64>
where
    F: Fn(Complex64) -> Complex64,
{
    let i = Complex64::i();
    let df = (-rate * t).exp();
    let logk = strike.ln();
    let integrand = |v: f64| {
        let u = Complex64::new(v, -(alpha + 1.0));
        let num = df * cf(u);
        let den = Complex64::new(alpha * alpha + alpha - v * v, (2.0 * alpha + 1.0) * v);
        ((-i * v * logk).exp() * num / den).re
    };

    let panel_width = 25.0;
    let max_panels = 400;
    let mut total = 0.0;
    let mut converged = false;
    for p in 0..max_panels {
        let a = p as f64 * panel_width;
        let b = a + panel_width;
        let contrib = integrate_panel(&integrand, a, b, 64);
        total += contrib;
        // tail truncation test: both the panel contribution and the endpoint
        // integrand must be negligible
        if contrib.abs() < 1e-12 && integrand(b).abs() < 1e-10 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "fourier pricing: truncation bound not reached by v = {}",
            max_panels as f64 * panel_width
        )));
    }
    let call = (-alpha * logk).exp() / std::f64::consts::PI * total;
    if is_call {
        Ok(call)
    } else {
        // parity: the forward is recovered from the cf's martingale drift
        let forward = cf(-i).re;
        Ok(call - df * (forward - strike))
    }
}

/// Carr–Madan damping for the Merton model.
pub const MERTON_DAMPING: f64 = 1.5;

/// Damping for Kou must satisfy α < η2 − 1; fall back below the default when
/// upward jumps are heavy-tailed.
pub fn kou_damping(params: &KouParams) -> f64 {
    (0.5 * (params.eta2 - 1.0)).min(1.5)
}

pub fn merton_price(params: &MertonParams, strike: f64, forward: f64, t: f64, is_call: bool) -> Result<f64> {
    price_cf(
        |u| merton_cf(u, params, forward, t),
        strike,
        params.rate,
        t,
        is_call,
        MERTON_DAMPING,
    )
}

pub fn kou_price(params: &KouParams, strike: f64, forward: f64, t: f64, is_call: bool) -> Result<f64> {
    price_cf(
        |u| kou_cf(u, params, forward, t),
        strike,
        params.rate,
        t,
        is_call,
        kou_damping(params),
    )
}

/// Independent Merton oracle: Poisson mixture of Black–Scholes prices,
/// truncated when the term drops below 1e-12.
pub fn merton_series_price(params: &MertonParams, strike: f64, forward: f64, t: f64, is_call: bool) -> f64 {
    let kappa = params.kappa();
    let lam_t = params.lambda_s * t;
    let mut weight = (-lam_t).exp(); // Poisson(0)
    let mut total = 0.0;
    for n in 0..200 {
        let nf = n as f64;
        let sigma_n = (params.sigma * params.sigma + nf * params.sigma_s * params.sigma_s / t).sqrt();
        let fwd_n = forward * (-params.lambda_s * kappa * t + nf * (params.mu_s + 0.5 * params.sigma_s * params.sigma_s)).exp();
        let term = weight
            * bs_price(&BsInputs {
                forward: fwd_n,
                strike,
                rate: params.rate,
                maturity: t,
                vol: sigma_n,
                is_call,
            });
        total += term;
        if n > lam_t as usize + 3 && term < 1e-12 {
            break;
        }
        weight *= lam_t / (nf + 1.0);
    }
    total
}

/// Terminal-price Monte Carlo under Kou dynamics (oracle for the Fourier
/// pricer). Returns (price, standard error).
pub fn kou_mc_price(
    params: &KouParams,
    strike: f64,
    forward: f64,
    t: f64,
    is_call: bool,
    n_paths: usize,
    seed: u64,
) -> (f64, f64) {
    let drift = forward.ln() - (params.lambda * params.zeta() + 0.5 * params.sigma * params.sigma) * t;
    let sig_sqrt_t = params.sigma * t.sqrt();
    let df = (-params.rate * t).exp();

    let n_blocks = 64.max(rayon::current_num_threads());
    let block = n_paths / n_blocks;
    let stats: Vec<(f64, f64, usize)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (b as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let poisson = Poisson::new((params.lambda * t).max(1e-300)).unwrap();
            let exp_up = Exp::new(params.eta2).unwrap();
            let exp_dn = Exp::new(params.eta1).unwrap();
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..block {
                let z: f64 = rng.sample(StandardNormal);
                let mut x = drift + sig_sqrt_t * z;
                if params.lambda > 0.0 {
                    let n_jumps = poisson.sample(&mut rng) as usize;
                    for _ in 0..n_jumps {
                        if rng.gen::<f64>() < params.p_up {
                            x += exp_up.sample(&mut rng);
                        } else {
                            x -= exp_dn.sample(&mut rng);
                        }
                    }
                }
                let s = x.exp();
                let payoff = if is_call { (s - strike).max(0.0) } else { (strike - s).max(0.0) };
                sum += payoff;
                sumsq += payoff * payoff;
            }
            (sum, sumsq, block)
        })
        .collect();

    let n = stats.iter().map(|s| s.2).sum::<usize>() as f64;
    let sum: f64 = stats.iter().map(|s| s.0).sum();
    let sumsq: f64 = stats.iter().map(|s| s.1).sum();
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    (df * mean, df * (var / n).sqrt())
}

/// A single quote in IV space for the calibration loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IvQuote {
    pub strike: f64,
    pub maturity: f64,
    pub forward: f64,
    pub iv: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Merton,
    Kou,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FittedParams {
    Merton(MertonParams),
    Kou(KouParams),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub params: FittedParams,
    /// Mean squared IV error at the optimum.
    pub mse: f64,
    pub n_quotes: usize,
    pub converged: bool,
    /// Rank of the winning start among the multistarts (0 = best objective).
    pub multistart_rank: usize,
}

/// Box bounds for the free calibration parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationBounds {
    pub sigma: (f64, f64),
    pub lambda: (f64, f64),
    pub mu_s: (f64, f64),
    pub sigma_s: (f64, f64),
    pub p_up: (f64, f64),
    pub eta1: (f64, f64),
    pub eta2: (f64, f64),
}

impl Default for CalibrationBounds {
    fn default() -> Self {
        CalibrationBounds {
            sigma: (1e-4, 3.0),
            lambda: (0.0, 5.0),
            mu_s: (-3.0, 3.0),
            sigma_s: (1e-4, 3.0),
            p_up: (0.0, 1.0),
            eta1: (1e-3, 50.0),
            eta2: (1.0001, 50.0),
        }
    }
}

fn to_unit(raw: f64) -> f64 {
    1.0 / (1.0 + (-raw).exp())
}

fn from_unit(u: f64) -> f64 {
    let c = u.clamp(1e-9, 1.0 - 1e-9);
    (c / (1.0 - c)).ln()
}

fn decode(raw: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    raw.iter()
        .zip(bounds)
        .map(|(&r, &(lo, hi))| lo + (hi - lo) * to_unit(r))
        .collect()
}

fn encode(vals: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    vals.iter()
        .zip(bounds)
        .map(|(&v, &(lo, hi))| from_unit(((v - lo) / (hi - lo)).clamp(0.0, 1.0)))
        .collect()
}

/// Model IV at a quote; `None` when the price is numerically out of the
/// static band (flagged, excluded from the loss).
fn model_iv(kind: ModelKind, theta: &[f64], rate: f64, div_yield: f64, q: &IvQuote) -> Option<f64> {
    model_iv_sloped(kind, theta, rate, div_yield, q).0
}

/// Like `model_iv`, but when the price falls outside the invertible band the
/// second slot carries a sloped overshoot so the calibration loss is not flat
/// on the infeasible plateau.
fn model_iv_sloped(
    kind: ModelKind,
    theta: &[f64],
    rate: f64,
    div_yield: f64,
    q: &IvQuote,
) -> (Option<f64>, f64) {
    let priced = match kind {
        ModelKind::Merton => {
            let p = MertonParams {
                sigma: theta[0],
                lambda_s: theta[1],
                mu_s: theta[2],
                sigma_s: theta[3],
                rate,
                div_yield,
            };
            merton_price(&p, q.strike, q.forward, q.maturity, true)
        }
        ModelKind::Kou => {
            let p = KouParams {
                sigma: theta[0],
                lambda: theta[1],
                p_up: theta[2],
                eta1: theta[3],
                eta2: theta[4],
                rate,
                div_yield,
            };
            kou_price(&p, q.strike, q.forward, q.maturity, true)
        }
    };
    let price = match priced {
        Ok(p) => p,
        Err(_) => return (None, 1.0),
    };
    match implied_vol(
        price,
        &BsInputs {
            forward: q.forward,
            strike: q.strike,
            rate,
            maturity: q.maturity,
            vol: 0.0,
            is_call: true,
        },
    ) {
        Ok(iv) => (Some(iv), 0.0),
        Err(Error::OutOfBand { price, lower, upper }) => {
            // distance past the invertible band, in forward units
            let over = if price > upper {
                (price - upper) / q.forward
            } else {
                (lower - price) / q.forward
            };
            (None, over)
        }
        Err(_) => (None, 1.0),
    }
}

/// Weighted mean squared IV error of a parameter vector.
fn iv_loss(kind: ModelKind, theta: &[f64], rate: f64, div_yield: f64, quotes: &[IvQuote]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for q in quotes {
        match model_iv_sloped(kind, theta, rate, div_yield, q) {
            (Some(iv), _) => {
                num += q.weight * (iv - q.iv).powi(2);
                den += q.weight;
            }
            (None, over) => {
                // degenerate corner: penalty grows with the band overshoot so
                // the optimizer can walk back off the infeasible plateau
                num += q.weight * (1.0 + over);
                den += q.weight;
            }
        }
    }
    if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Model implied-volatility surface on a strike × maturity grid.
/// `None` entries mark numerically degenerate corners.
pub fn model_iv_surface(
    kind: ModelKind,
    theta: &[f64],
    rate: f64,
    div_yield: f64,
    strikes: &[f64],
    maturities: &[f64],
    forward: f64,
) -> Vec<Vec<Option<f64>>> {
    maturities
        .iter()
        .map(|&t| {
            strikes
                .iter()
                .map(|&k| {
                    model_iv(
                        kind,
                        theta,
                        rate,
                        div_yield,
                        &IvQuote { strike: k, maturity: t, forward, iv: 0.0, weight: 1.0 },
                    )
                })
                .collect()
        })
        .collect()
}

/// Least-squares calibration of a jump model to observed IVs, multistart
/// Nelder–Mead in a logistic reparameterization of the box bounds.
pub fn calibrate(
    kind: ModelKind,
    quotes: &[IvQuote],
    rate: f64,
    div_yield: f64,
    bounds: &CalibrationBounds,
    n_starts: usize,
    seed: u64,
) -> Result<CalibrationResult> {
    let free: Vec<(f64, f64)> = match kind {
        ModelKind::Merton => vec![bounds.sigma, bounds.lambda, bounds.mu_s, bounds.sigma_s],
        ModelKind::Kou => vec![bounds.sigma, bounds.lambda, bounds.p_up, bounds.eta1, bounds.eta2],
    };
    let n_params = free.len();
    if quotes.len() < n_params {
        return Err(Error::Parameter(format!(
            "calibration needs at least {n_params} quotes, got {}",
            quotes.len()
        )));
    }

    let loss = |raw: &[f64]| iv_loss(kind, &decode(raw, &free), rate, div_yield, quotes);

    // anchor the diffusion vol near the level of the data; a mid-box sigma
    // can price every quote off the invertible band, where the loss is flat
    let mean_iv = quotes.iter().map(|q| q.iv).sum::<f64>() / quotes.len() as f64;
    let clamp_sigma = |s: f64| s.clamp(bounds.sigma.0, bounds.sigma.1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(n_starts);
    let deterministic = match kind {
        ModelKind::Merton => vec![clamp_sigma(mean_iv), 0.1, 0.0, clamp_sigma(0.5 * mean_iv)],
        ModelKind::Kou => vec![
            clamp_sigma(mean_iv),
            0.1,
            0.5,
            0.5 * (bounds.eta1.0 + bounds.eta1.1),
            0.5 * (bounds.eta2.0 + bounds.eta2.1),
        ],
    };
    starts.push(encode(&deterministic, &free));
    for _ in 1..n_starts {
        let sigma = clamp_sigma(mean_iv * rng.gen_range(0.3..1.5));
        let lambda = bounds.lambda.0 + rng.gen_range(0.0..0.4) * (bounds.lambda.1 - bounds.lambda.0);
        let vals = match kind {
            ModelKind::Merton => vec![
                sigma,
                lambda,
                bounds.mu_s.0 + rng.gen_range(0.2..0.8) * (bounds.mu_s.1 - bounds.mu_s.0),
                clamp_sigma(mean_iv * rng.gen_range(0.2..1.5)),
            ],
            ModelKind::Kou => vec![
                sigma,
                lambda,
                rng.gen_range(0.05..0.95),
                bounds.eta1.0 + rng.gen_range(0.02..0.6) * (bounds.eta1.1 - bounds.eta1.0),
                bounds.eta2.0 + rng.gen_range(0.02..0.6) * (bounds.eta2.1 - bounds.eta2.0),
            ],
        };
        starts.push(encode(&vals, &free));
    }

    let mut runs: Vec<(usize, crate::math::optim::OptimResult)> = starts
        .into_par_iter()
        .enumerate()
        .map(|(idx, s)| {
            let r = crate::math::optim::nelder_mead(&loss, &s, 0.8, 1e-9, 4000);
            // polish with a restart at the incumbent
            let r2 = crate::math::optim::nelder_mead(&loss, &r.x, 0.05, 1e-9, 4000);
            let best = if r2.fval <= r.fval { r2 } else { r };
            (idx, best)
        })
        .collect();

    runs.sort_by(|a, b| a.1.fval.partial_cmp(&b.1.fval).unwrap_or(std::cmp::Ordering::Equal));
    if runs.iter().all(|r| !r.1.fval.is_finite()) {
        return Err(Error::Numeric("calibration: all starts failed".into()));
    }
    let (start_idx, best) = &runs[0];
    let theta = decode(&best.x, &free);
    let params = match kind {
        ModelKind::Merton => FittedParams::Merton(MertonParams {
            sigma: theta[0],
            lambda_s: theta[1],
            mu_s: theta[2],
            sigma_s: theta[3],
            rate,
            div_yield,
        }),
        ModelKind::Kou => FittedParams::Kou(KouParams {
            sigma: theta[0],
            lambda: theta[1],
            p_up: theta[2],
            eta1: theta[3],
            eta2: theta[4],
            rate,
            div_yield,
        }),
    };
    Ok(CalibrationResult {
        params,
        mse: best.fval,
        n_quotes: quotes.len(),
        converged: best.converged,
        multistart_rank: *start_idx,
    })
}
