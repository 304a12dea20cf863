//! Black–Scholes pricing on the forward, implied-volatility inversion, and
//! Cox–Ross–Rubinstein binomial trees with the American-to-European
//! conversion used when ingesting American quotes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::norm_cdf;

pub const VOL_LO: f64 = 1e-6;
pub const VOL_HI: f64 = 10.0;
pub const DEFAULT_TREE_STEPS: usize = 500;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BsInputs {
    pub forward: f64,
    pub strike: f64,
    pub rate: f64,
    pub maturity: f64,
    pub vol: f64,
    pub is_call: bool,
}

impl BsInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.forward > 0.0 && self.strike > 0.0) {
            return Err(Error::Parameter("forward and strike must be positive".into()));
        }
        if !(self.maturity > 0.0) {
            return Err(Error::Parameter("maturity must be positive".into()));
        }
        if self.vol < 0.0 {
            return Err(Error::Parameter("vol must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Black formula on the forward, discounted at `rate`. Zero vol degenerates
/// to discounted intrinsic on the forward.
pub fn bs_price(inp: &BsInputs) -> f64 {
    let BsInputs { forward: f, strike: k, rate, maturity: t, vol, is_call } = *inp;
    let df = (-rate * t).exp();
    let sqrt_t = t.sqrt();
    if vol * sqrt_t < 1e-12 {
        let intrinsic = if is_call { (f - k).max(0.0) } else { (k - f).max(0.0) };
        return df * intrinsic;
    }
    let d1 = ((f / k).ln() + 0.5 * vol * vol * t) / (vol * sqrt_t);
    let d2 = d1 - vol * sqrt_t;
    if is_call {
        df * (f * norm_cdf(d1) - k * norm_cdf(d2))
    } else {
        df * (k * norm_cdf(-d2) - f * norm_cdf(-d1))
    }
}

/// Black–Scholes vega (same for calls and puts).
pub fn bs_vega(inp: &BsInputs) -> f64 {
    let BsInputs { forward: f, strike: k, rate, maturity: t, vol, .. } = *inp;
    let sqrt_t = t.sqrt();
    if vol * sqrt_t < 1e-12 {
        return 0.0;
    }
    let d1 = ((f / k).ln() + 0.5 * vol * vol * t) / (vol * sqrt_t);
    (-rate * t).exp() * f * crate::math::norm_pdf(d1) * sqrt_t
}

/// Static arbitrage band for a European price: (lower, upper).
pub fn static_band(forward: f64, strike: f64, rate: f64, maturity: f64, is_call: bool) -> (f64, f64) {
    let df = (-rate * maturity).exp();
    if is_call {
        (df * (forward - strike).max(0.0), df * forward)
    } else {
        (df * (strike - forward).max(0.0), df * strike)
    }
}

/// Invert the Black formula for volatility. Safeguarded Newton with
/// bisection fallback on the bracket [1e-6, 10].
pub fn implied_vol(price: f64, inp: &BsInputs) -> Result<f64> {
    let (lower, upper) = static_band(inp.forward, inp.strike, inp.rate, inp.maturity, inp.is_call);
    if price < lower - 1e-12 || price > upper + 1e-12 {
        return Err(Error::OutOfBand { price, lower, upper });
    }
    let target_tol = 1e-10 * inp.forward;
    let price_at = |v: f64| bs_price(&BsInputs { vol: v, ..*inp });

    let mut lo = VOL_LO;
    let mut hi = VOL_HI;
    let f_lo = price_at(lo) - price;
    if f_lo > 0.0 {
        // price below what the lowest vol produces: effectively intrinsic
        return Ok(lo);
    }
    if price_at(hi) - price < 0.0 {
        return Err(Error::OutOfBand { price, lower, upper: price_at(hi) });
    }

    let mut v = 0.2_f64.clamp(lo, hi);
    for _ in 0..200 {
        let diff = price_at(v) - price;
        if diff.abs() <= target_tol {
            return Ok(v);
        }
        if diff > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        let vega = bs_vega(&BsInputs { vol: v, ..*inp });
        let newton = if vega > 1e-14 { v - diff / vega } else { f64::NAN };
        v = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(v)
}

/// Cox–Ross–Rubinstein lattice price on the spot, `u = exp(σ√Δt)`.
/// `american` applies the early-exercise max at every node.
pub fn crr_price(
    inp: &BsInputs,
    n_steps: usize,
    american: bool,
    spot: f64,
    div_yield: f64,
) -> f64 {
    assert!(n_steps >= 1, "n_steps must be >= 1");
    let BsInputs { strike: k, rate, maturity: t, vol, is_call, .. } = *inp;
    let dt = t / n_steps as f64;
    let u = (vol.max(1e-12) * dt.sqrt()).exp();
    let d = 1.0 / u;
    let growth = ((rate - div_yield) * dt).exp();
    let p = ((growth - d) / (u - d)).clamp(0.0, 1.0);
    let disc = (-rate * dt).exp();

    let payoff = |s: f64| if is_call { (s - k).max(0.0) } else { (k - s).max(0.0) };

    // terminal layer
    let mut values: Vec<f64> = (0..=n_steps)
        .map(|j| payoff(spot * u.powi(j as i32) * d.powi((n_steps - j) as i32)))
        .collect();

    for step in (0..n_steps).rev() {
        for j in 0..=step {
            let cont = disc * (p * values[j + 1] + (1.0 - p) * values[j]);
            values[j] = if american {
                let s = spot * u.powi(j as i32) * d.powi((step - j) as i32);
                cont.max(payoff(s))
            } else {
                cont
            };
        }
        values.truncate(step + 1);
    }
    values[0]
}

/// Invert the American CRR price for its tree-implied volatility, then
/// reprice as a European Black–Scholes option at that vol.
///
/// `spot` and fields of `market` define the market: the forward used for the
/// European price is `spot · exp((r − δ)T)`.
pub fn de_americanize(
    american_price: f64,
    spot: f64,
    strike: f64,
    rate: f64,
    div_yield: f64,
    maturity: f64,
    is_call: bool,
    n_steps: usize,
) -> Result<f64> {
    let forward = spot * ((rate - div_yield) * maturity).exp();
    let inp = |v: f64| BsInputs {
        forward,
        strike,
        rate,
        maturity,
        vol: v,
        is_call,
    };
    let price_at = |v: f64| crr_price(&inp(v), n_steps, true, spot, div_yield);

    let p_lo = price_at(VOL_LO);
    let p_hi = price_at(VOL_HI);
    if american_price < p_lo - 1e-12 || american_price > p_hi + 1e-12 {
        return Err(Error::OutOfBand { price: american_price, lower: p_lo, upper: p_hi });
    }

    // CRR price is monotone in vol: bisection with secant acceleration.
    let mut lo = VOL_LO;
    let mut hi = VOL_HI;
    let mut v = 0.2;
    for _ in 0..200 {
        let diff = price_at(v) - american_price;
        if diff.abs() <= 1e-12 * spot.max(1.0) {
            break;
        }
        if diff > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        if hi - lo < 1e-12 {
            break;
        }
        v = 0.5 * (lo + hi);
    }
    Ok(bs_price(&inp(v)))
}
