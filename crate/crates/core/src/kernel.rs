//! Pricing kernels and wealth risk aversion.
//!
//! The projected pricing kernel on a price grid is ζ(S) = e^{rT}·f*(S)/f(S),
//! the discount-adjusted ratio of the risk-neutral to the physical density on
//! their common support. Under CRRA-style behavior its log is linear in
//! log S with slope −γ^w, the Arrow–Pratt elasticity with respect to the
//! stock price. A closed form ties that elasticity to wealth risk aversion,
//!
//!   γ^w = (q_w + ρ·(σ/σ_w)·q)·γ,   ρ = βσ / √(β²σ² + σ_w²),
//!
//! which this module inverts (γ from γ^w, or the implied portfolio share q_w
//! from γ), derives from the Merton consumption-portfolio solution, and
//! verifies by Monte Carlo on the bivariate-lognormal construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{fe_fit, PanelObs};
use crate::rnd::DensityCurve;

/// Densities below this are treated as unsupported when intersecting.
pub const DENSITY_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PricingKernelCurve {
    /// Price grid points on the intersected support.
    pub grid: Vec<f64>,
    /// e^{rT}·f*/f at each kept grid point.
    pub kernel_values: Vec<f64>,
    pub log_moneyness: Vec<f64>,
    pub maturity: f64,
    pub rate: f64,
    /// Grid points dropped because either density fell below the floor.
    pub dropped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskAversionEstimate {
    /// Arrow–Pratt elasticity of the pricing kernel w.r.t. the stock price.
    pub gamma_w: f64,
    pub se: f64,
    pub t_stat: f64,
    /// Negative elasticity: the pricing-kernel puzzle region.
    pub puzzle: bool,
    pub n_points: usize,
    pub r_squared: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortfolioDecomposition {
    /// Wealth share in the index.
    pub q: f64,
    /// Wealth share in the wildfire-exposed stock.
    pub q_w: f64,
    pub beta: f64,
    pub sigma: f64,
    pub sigma_w: f64,
    /// Correlation of the stock with wealth, βσ/√(β²σ²+σ_w²).
    pub rho: f64,
    pub gamma: Option<f64>,
}

impl PortfolioDecomposition {
    pub fn new(q: f64, q_w: f64, beta: f64, sigma: f64, sigma_w: f64) -> Result<Self> {
        if sigma <= 0.0 || sigma_w <= 0.0 {
            return Err(Error::Parameter(format!(
                "volatilities must be positive, got sigma={sigma}, sigma_w={sigma_w}"
            )));
        }
        let rho = beta * sigma / (beta * beta * sigma * sigma + sigma_w * sigma_w).sqrt();
        Ok(Self { q, q_w, beta, sigma, sigma_w, rho, gamma: None })
    }

    /// Effective exposure q_w + ρ·(σ/σ_w)·q, the multiplier between γ and γ^w.
    pub fn effective_exposure(&self) -> f64 {
        self.q_w + self.rho * self.sigma / self.sigma_w * self.q
    }
}

/// Discount-adjusted density ratio on the common support.
pub fn pricing_kernel(
    rnd: &DensityCurve,
    phys: &DensityCurve,
    rate: f64,
    maturity: f64,
) -> Result<PricingKernelCurve> {
    if rnd.grid.len() != phys.grid.len()
        || rnd
            .grid
            .iter()
            .zip(&phys.grid)
            .any(|(a, b)| (a - b).abs() > 1e-9 * a.abs().max(1.0))
    {
        return Err(Error::Parameter("density grids do not match".into()));
    }
    if maturity <= 0.0 {
        return Err(Error::Parameter(format!("maturity must be positive, got {maturity}")));
    }
    let growth = (rate * maturity).exp();
    let mut grid = Vec::new();
    let mut kernel_values = Vec::new();
    let mut dropped = 0usize;
    for i in 0..rnd.grid.len() {
        if rnd.values[i] > DENSITY_FLOOR && phys.values[i] > DENSITY_FLOOR && rnd.grid[i] > 0.0 {
            grid.push(rnd.grid[i]);
            kernel_values.push(growth * rnd.values[i] / phys.values[i]);
        } else {
            dropped += 1;
        }
    }
    if grid.len() < 10 {
        return Err(Error::Data(format!(
            "common density support too small: {} points (need 10)",
            grid.len()
        )));
    }
    let log_moneyness = grid.iter().map(|s| s.ln()).collect();
    Ok(PricingKernelCurve { grid, kernel_values, log_moneyness, maturity, rate, dropped })
}

/// One firm-day pricing kernel for pooled estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSlice {
    pub firm: u32,
    pub date: u32,
    pub curve: PricingKernelCurve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaFe {
    /// Plain OLS with intercept; heteroskedasticity-robust SEs.
    None,
    /// Firm, date, and 10 maturity-bin effects absorbed; SEs double-clustered
    /// by firm and date.
    Pooled,
}

const MATURITY_BINS: usize = 10;

fn maturity_bins(slices: &[KernelSlice]) -> Vec<u32> {
    let mut ts: Vec<f64> = slices.iter().map(|s| s.curve.maturity).collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let edges: Vec<f64> = (1..MATURITY_BINS).map(|b| ts[(b * ts.len()) / MATURITY_BINS]).collect();
    slices
        .iter()
        .map(|s| edges.partition_point(|&e| e <= s.curve.maturity) as u32)
        .collect()
}

/// Arrow–Pratt elasticity γ^w: regression of the log kernel
/// (= log f* − log f + rT) on −log S.
pub fn estimate_gamma_w(slices: &[KernelSlice], fe: GammaFe) -> Result<RiskAversionEstimate> {
    if slices.is_empty() {
        return Err(Error::Data("no kernel slices".into()));
    }
    for s in slices {
        if s.curve.kernel_values.iter().any(|&v| v <= 0.0) {
            return Err(Error::Data("kernel values must be positive".into()));
        }
    }
    match fe {
        GammaFe::None => {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for s in slices {
                for (ls, kv) in s.curve.log_moneyness.iter().zip(&s.curve.kernel_values) {
                    x.push(-ls);
                    y.push(kv.ln());
                }
            }
            robust_ols(&x, &y)
        }
        GammaFe::Pooled => {
            let bins = maturity_bins(slices);
            let mut obs = Vec::new();
            let mut firms = Vec::new();
            let mut dates = Vec::new();
            let mut bin_f = Vec::new();
            for (s, &b) in slices.iter().zip(&bins) {
                for (ls, kv) in s.curve.log_moneyness.iter().zip(&s.curve.kernel_values) {
                    obs.push(PanelObs {
                        firm: s.firm,
                        date: s.date,
                        y: kv.ln(),
                        x: vec![-ls],
                        weight: 1.0,
                    });
                    firms.push(s.firm);
                    dates.push(s.date);
                    bin_f.push(b);
                }
            }
            let names = vec!["neg_log_price".to_string()];
            let (fit, _) = fe_fit(&obs, &names, &[firms, dates, bin_f])?;
            if fit.names.is_empty() || fit.dropped.contains(&names[0]) {
                return Err(Error::Collinear(
                    "neg_log_price absorbed by fixed effects".into(),
                ));
            }
            let gamma_w = fit.coefs[0];
            let se = fit.se[0];
            Ok(RiskAversionEstimate {
                gamma_w,
                se,
                t_stat: if se > 0.0 { gamma_w / se } else { f64::INFINITY },
                puzzle: gamma_w < 0.0,
                n_points: fit.n,
                r_squared: fit.r2_within,
            })
        }
    }
}

/// OLS of y on [1, x] with HC1 robust SEs on the slope.
fn robust_ols(x: &[f64], y: &[f64]) -> Result<RiskAversionEstimate> {
    let n = x.len();
    if n < 3 {
        return Err(Error::Data(format!("need >= 3 points, got {n}")));
    }
    let xm = x.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - xm) * (v - xm)).sum();
    let scale = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if sxx <= 1e-12 * scale.max(1.0) {
        return Err(Error::Collinear("neg_log_price is constant".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let resid: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - intercept - slope * a).collect();
    let meat: f64 = x.iter().zip(&resid).map(|(a, e)| ((a - xm) * e).powi(2)).sum();
    let se = (n as f64 / (n as f64 - 2.0) * meat).sqrt() / sxx;
    let syy: f64 = y.iter().map(|v| (v - ym) * (v - ym)).sum();
    let rss: f64 = resid.iter().map(|e| e * e).sum();
    let r_squared = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    Ok(RiskAversionEstimate {
        gamma_w: slope,
        se,
        t_stat: if se > 0.0 { slope / se } else { f64::INFINITY },
        puzzle: slope < 0.0,
        n_points: n,
        r_squared,
    })
}

/// Wealth risk aversion from the kernel elasticity:
/// γ = γ^w / (q_w + ρ·(σ/σ_w)·q).
pub fn gamma_from_gamma_w(gamma_w: f64, decomp: &PortfolioDecomposition) -> Result<f64> {
    let den = decomp.effective_exposure();
    if den.abs() < 1e-14 {
        return Err(Error::Numeric("unidentified: zero effective exposure".into()));
    }
    Ok(gamma_w / den)
}

/// Portfolio share in the exposed stock implied by (γ^w, γ):
/// q_w = γ^w/γ − ρ·(σ/σ_w)·q. Negative shares are returned and flagged.
pub fn implied_portfolio_share(
    gamma_w: f64,
    gamma: f64,
    rho: f64,
    sigma: f64,
    sigma_w: f64,
    q: f64,
) -> Result<(f64, bool)> {
    if gamma <= 0.0 {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    let q_w = gamma_w / gamma - rho * sigma / sigma_w * q;
    Ok((q_w, q_w < 0.0))
}

/// Optimal Merton shares from the HJB solution:
/// q_w = (α+βμ−r)/(γσ_w²), q = (μ−r)/(γσ²) − q_w·β.
pub fn merton_optimal_shares(
    mu: f64,
    alpha: f64,
    beta: f64,
    sigma: f64,
    sigma_w: f64,
    r: f64,
    gamma: f64,
) -> Result<(f64, f64)> {
    if gamma <= 0.0 || sigma <= 0.0 || sigma_w <= 0.0 {
        return Err(Error::Parameter(
            "gamma, sigma and sigma_w must be positive".into(),
        ));
    }
    let q_w = (alpha + beta * mu - r) / (gamma * sigma_w * sigma_w);
    let q = (mu - r) / (gamma * sigma * sigma) - q_w * beta;
    Ok((q, q_w))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop1Report {
    pub slope: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub theoretical_slope: f64,
    pub rho: f64,
    /// Theoretical slope inside the 95% CI.
    pub consistent: bool,
    pub n_paths: usize,
}

#[allow(clippy::too_many_arguments)]
/// Monte Carlo check of the closed-form kernel elasticity. Simulates the
/// proof's bivariate construction: (x, y) jointly normal with standard
/// deviations σ√T and σ_w√T and correlation ρ = βσ/√(β²σ²+σ_w²);
/// log wealth loads q·x + q_w·y, the exposed stock's log price moves with y,
/// and ζ = W^{−γ}. Regression of log ζ on log S^w is exact under joint
/// normality and must recover −(q_w + ρ·σ/σ_w·q)·γ.
pub fn verify_prop1_mc(
    q: f64,
    q_w: f64,
    beta: f64,
    sigma: f64,
    sigma_w: f64,
    mu: f64,
    alpha: f64,
    r: f64,
    gamma: f64,
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Prop1Report> {
    if n_paths < 100_000 {
        return Err(Error::Parameter(format!("need >= 1e5 paths, got {n_paths}")));
    }
    if sigma <= 0.0 || sigma_w <= 0.0 || t <= 0.0 || gamma <= 0.0 {
        return Err(Error::Parameter("sigma, sigma_w, t, gamma must be positive".into()));
    }
    let decomp = PortfolioDecomposition::new(q, q_w, beta, sigma, sigma_w)?;
    let rho = decomp.rho;
    let theoretical_slope = -decomp.effective_exposure() * gamma;

    let sx = sigma * t.sqrt();
    let sy = sigma_w * t.sqrt();
    let wealth_drift =
        (r + q * (mu - r) + q_w * (alpha + beta * mu - r)
            - 0.5 * (q * q * sx * sx + q_w * q_w * sy * sy + 2.0 * q * q_w * rho * sx * sy) / t)
            * t;
    let stock_drift = (alpha + beta * mu - 0.5 * sigma_w * sigma_w) * t;

    const BLOCK: usize = 1 << 14;
    let n_blocks = n_paths.div_ceil(BLOCK);
    let partials: Vec<[f64; 6]> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (b as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let count = BLOCK.min(n_paths - b * BLOCK);
            let mut s = [0.0_f64; 6]; // n, Σx, Σy, Σxx, Σxy, Σyy
            for _ in 0..count {
                let z1: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let z2: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let x = sx * z1;
                let y = sy * (rho * z1 + (1.0 - rho * rho).sqrt() * z2);
                let log_w = wealth_drift + q * x + q_w * y;
                let log_s = stock_drift + y;
                let log_zeta = -gamma * log_w;
                s[0] += 1.0;
                s[1] += log_s;
                s[2] += log_zeta;
                s[3] += log_s * log_s;
                s[4] += log_s * log_zeta;
                s[5] += log_zeta * log_zeta;
            }
            s
        })
        .collect();
    let mut tot = [0.0_f64; 6];
    for p in &partials {
        for i in 0..6 {
            tot[i] += p[i];
        }
    }
    let n = tot[0];
    let sxx = tot[3] - tot[1] * tot[1] / n;
    let sxy = tot[4] - tot[1] * tot[2] / n;
    let syy = tot[5] - tot[2] * tot[2] / n;
    if !(sxx > 0.0) {
        // degenerate regressor (e.g. sigma_w effectively zero exposure path)
        return Ok(Prop1Report {
            slope: 0.0,
            se: 0.0,
            ci_low: 0.0,
            ci_high: 0.0,
            theoretical_slope,
            rho,
            consistent: theoretical_slope == 0.0,
            n_paths,
        });
    }
    let slope = sxy / sxx;
    let rss = (syy - slope * sxy).max(0.0);
    let se = (rss / (n - 2.0) / sxx).sqrt();
    let (ci_low, ci_high) = (slope - 1.96 * se, slope + 1.96 * se);
    Ok(Prop1Report {
        slope,
        se,
        ci_low,
        ci_high,
        theoretical_slope,
        rho,
        consistent: theoretical_slope >= ci_low && theoretical_slope <= ci_high,
        n_paths,
    })
}

/// Analytic lognormal density helper shared by tests and fixtures:
/// density of S_T = S0·exp((drift − σ²/2)T + σ√T·Z) on a grid.
pub fn lognormal_curve(
    grid: &[f64],
    s0: f64,
    drift: f64,
    sigma: f64,
    t: f64,
    kind: crate::rnd::DensityKind,
    rate: f64,
) -> DensityCurve {
    let m = s0.ln() + (drift - 0.5 * sigma * sigma) * t;
    let sd = sigma * t.sqrt();
    let values: Vec<f64> = grid
        .iter()
        .map(|&s| {
            if s <= 0.0 {
                0.0
            } else {
                (-((s.ln() - m) / sd).powi(2) / 2.0).exp() / (s * sd * (2.0 * std::f64::consts::PI).sqrt())
            }
        })
        .collect();
    let mass = crate::math::trapezoid(grid, &values);
    DensityCurve {
        grid: grid.to_vec(),
        values,
        maturity: t,
        discount: (-rate * t).exp(),
        kind,
        mass,
        unsupported: vec![false; grid.len()],
        bandwidth: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnd::DensityKind;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn grid() -> Vec<f64> {
        (0..200).map(|i| 50.0 + 0.5 * i as f64).collect()
    }

    #[test]
    fn identical_densities_give_unit_kernel() {
        let g = grid();
        let f = lognormal_curve(&g, 100.0, 0.0, 0.2, 0.5, DensityKind::RiskNeutral, 0.0);
        let p = lognormal_curve(&g, 100.0, 0.0, 0.2, 0.5, DensityKind::Physical, 0.0);
        let k = pricing_kernel(&f, &p, 0.0, 0.5).unwrap();
        for v in &k.kernel_values {
            assert_abs_diff_eq!(v, &1.0, epsilon = 1e-12);
        }
        let est = estimate_gamma_w(
            &[KernelSlice { firm: 0, date: 0, curve: k }],
            GammaFe::None,
        )
        .unwrap();
        assert_abs_diff_eq!(est.gamma_w, 0.0, epsilon = 1e-10);
        assert!(!est.puzzle);
    }

    #[test]
    fn bs_power_kernel_slope_exact() {
        // f* lognormal drift r, f lognormal drift mu, same sigma:
        // log kernel linear in log S with slope -(mu-r)/sigma^2
        let g = grid();
        let (r, mu, sigma, t) = (0.02, 0.11, 0.15, 0.5);
        let rnd = lognormal_curve(&g, 100.0, r, sigma, t, DensityKind::RiskNeutral, r);
        let phys = lognormal_curve(&g, 100.0, mu, sigma, t, DensityKind::Physical, r);
        let k = pricing_kernel(&rnd, &phys, r, t).unwrap();
        let est = estimate_gamma_w(
            &[KernelSlice { firm: 0, date: 0, curve: k }],
            GammaFe::None,
        )
        .unwrap();
        let truth = (mu - r) / (sigma * sigma);
        assert_abs_diff_eq!(est.gamma_w, truth, epsilon = 1e-6);
        assert!(est.r_squared > 1.0 - 1e-10);
        assert!(!est.puzzle);
        assert!(est.se >= 0.0 && est.n_points >= 3);
    }

    #[test]
    fn empty_overlap_is_error() {
        let g = grid();
        let rnd = lognormal_curve(&g, 100.0, 0.0, 0.05, 0.05, DensityKind::RiskNeutral, 0.0);
        let mut phys = rnd.clone();
        for v in phys.values.iter_mut() {
            *v = 0.0;
        }
        assert!(pricing_kernel(&rnd, &phys, 0.0, 0.05).is_err());
    }

    #[test]
    fn mismatched_grids_error() {
        let g = grid();
        let g2: Vec<f64> = g.iter().map(|x| x + 1.0).collect();
        let rnd = lognormal_curve(&g, 100.0, 0.0, 0.2, 0.5, DensityKind::RiskNeutral, 0.0);
        let phys = lognormal_curve(&g2, 100.0, 0.0, 0.2, 0.5, DensityKind::Physical, 0.0);
        assert!(pricing_kernel(&rnd, &phys, 0.0, 0.5).is_err());
    }

    fn power_slice(firm: u32, date: u32, slope: f64, level: f64, t: f64) -> KernelSlice {
        let g = grid();
        let kernel_values: Vec<f64> = g.iter().map(|s| level * s.powf(-slope)).collect();
        let log_moneyness = g.iter().map(|s| s.ln()).collect();
        KernelSlice {
            firm,
            date,
            curve: PricingKernelCurve {
                grid: g,
                kernel_values,
                log_moneyness,
                maturity: t,
                rate: 0.0,
                dropped: 0,
            },
        }
    }

    #[test]
    fn pooled_fe_recovers_common_slope() {
        // firm/date level shifts are absorbed; slope shared
        let mut slices = Vec::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for firm in 0..5u32 {
            for date in 0..8u32 {
                let level = (rng.gen_range(-0.5..0.5) as f64).exp();
                let t = 0.05 + 0.05 * ((firm + date) % 12) as f64;
                slices.push(power_slice(firm, date, 4.0, level, t));
            }
        }
        let est = estimate_gamma_w(&slices, GammaFe::Pooled).unwrap();
        assert_abs_diff_eq!(est.gamma_w, 4.0, epsilon = 1e-6);
        assert!(est.se > 0.0);
    }

    #[test]
    fn constant_regressor_is_collinear_error() {
        let mut s = power_slice(0, 0, 4.0, 1.0, 0.5);
        let v = s.curve.log_moneyness[0];
        for lm in s.curve.log_moneyness.iter_mut() {
            *lm = v;
        }
        let err = estimate_gamma_w(&[s], GammaFe::None).unwrap_err();
        assert!(err.to_string().contains("neg_log_price"), "{err}");
    }

    #[test]
    fn single_day_fixture_magnitude() {
        // single-slice fixture whose elasticity is 6.19 by construction
        let s = power_slice(0, 0, 6.19, 1.0, 0.25);
        let est = estimate_gamma_w(&[s], GammaFe::None).unwrap();
        assert_abs_diff_eq!(est.gamma_w, 6.19, epsilon = 1e-8);
    }

    #[test]
    fn gamma_inversion_magnitudes() {
        // effective exposure back-solved so 6.19 maps to ~242.8
        let exposure = 0.025494;
        let mut d = PortfolioDecomposition::new(0.0, exposure, 0.0, 0.15, 0.3).unwrap();
        assert_abs_diff_eq!(gamma_from_gamma_w(6.19, &d).unwrap(), 242.8, epsilon = 0.1);
        d.q_w = 0.025503;
        assert_abs_diff_eq!(gamma_from_gamma_w(4.56, &d).unwrap(), 178.8, epsilon = 0.1);
    }

    #[test]
    fn beta_zero_degenerate_case() {
        let d = PortfolioDecomposition::new(0.0, 0.1, 0.0, 0.15, 0.3).unwrap();
        assert_abs_diff_eq!(d.rho, 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(gamma_from_gamma_w(0.4, &d).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_exposure_unidentified() {
        let d = PortfolioDecomposition::new(0.0, 0.0, 0.0, 0.15, 0.3).unwrap();
        let err = gamma_from_gamma_w(1.0, &d).unwrap_err();
        assert!(err.to_string().contains("unidentified: zero effective exposure"));
    }

    #[test]
    fn share_inversion_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let q: f64 = rng.gen_range(0.0..1.0);
            let q_w: f64 = rng.gen_range(0.001..0.5);
            let beta: f64 = rng.gen_range(-1.0..2.0);
            let sigma: f64 = rng.gen_range(0.05..0.5);
            let sigma_w: f64 = rng.gen_range(0.05..0.8);
            let gamma_w: f64 = rng.gen_range(0.1..10.0);
            let d = PortfolioDecomposition::new(q, q_w, beta, sigma, sigma_w).unwrap();
            if d.effective_exposure().abs() < 1e-6 {
                continue;
            }
            let gamma = gamma_from_gamma_w(gamma_w, &d).unwrap();
            if gamma <= 0.0 {
                continue;
            }
            let (q_w_back, _) =
                implied_portfolio_share(gamma_w, gamma, d.rho, sigma, sigma_w, q).unwrap();
            assert_abs_diff_eq!(q_w_back, q_w, epsilon = 1e-12);
        }
    }

    #[test]
    fn negative_share_flagged() {
        let (q_w, flagged) = implied_portfolio_share(0.1, 4.0, 0.9, 0.3, 0.3, 0.9).unwrap();
        assert!(q_w < 0.0 && flagged);
    }

    #[test]
    fn rho_invariant_exact() {
        let d = PortfolioDecomposition::new(0.5, 0.1, 0.8, 0.15, 0.3).unwrap();
        assert_abs_diff_eq!(d.rho, 0.8 * 0.15 / (0.64_f64 * 0.0225 + 0.09).sqrt(), epsilon = 0.0);
        assert_abs_diff_eq!(d.rho, 0.37137, epsilon = 5e-5);
    }

    #[test]
    fn merton_shares_hand_arithmetic() {
        let (q, q_w) = merton_optimal_shares(0.07, 0.01, 0.8, 0.15, 0.3, 0.02, 4.0).unwrap();
        assert_abs_diff_eq!(q_w, 0.12778, epsilon = 5e-5);
        assert_abs_diff_eq!(q, 0.45333, epsilon = 5e-5);
        // alpha + beta*mu = r => q_w = 0
        let (_, q_w0) = merton_optimal_shares(0.07, 0.02 - 0.8 * 0.07, 0.8, 0.15, 0.3, 0.02, 4.0).unwrap();
        assert_abs_diff_eq!(q_w0, 0.0, epsilon = 1e-15);
        // mu = r, alpha > r => q = -q_w*beta
        let (q1, q_w1) = merton_optimal_shares(0.02, 0.05, 0.8, 0.15, 0.3, 0.02, 4.0).unwrap();
        assert_abs_diff_eq!(q1, -q_w1 * 0.8, epsilon = 1e-15);
    }

    #[test]
    fn prop1_mc_matches_closed_form() {
        let rep = verify_prop1_mc(
            0.5, 0.1, 0.8, 0.15, 0.3, 0.07, 0.01, 0.02, 4.0, 1.0, 400_000, 42,
        )
        .unwrap();
        assert_abs_diff_eq!(rep.theoretical_slope, -0.77142, epsilon = 5e-4);
        assert!(
            (rep.slope - rep.theoretical_slope).abs() < 3.0 * rep.se,
            "slope {} vs {} (se {})",
            rep.slope,
            rep.theoretical_slope,
            rep.se
        );
    }

    #[test]
    fn prop1_no_exposure_zero_slope() {
        let rep = verify_prop1_mc(
            0.0, 0.0, 0.8, 0.15, 0.3, 0.07, 0.01, 0.02, 4.0, 1.0, 100_000, 1,
        )
        .unwrap();
        assert_abs_diff_eq!(rep.slope, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rep.theoretical_slope, 0.0, epsilon = 0.0);
    }

    #[test]
    fn prop1_large_sigma_w_limit() {
        let rep = verify_prop1_mc(
            0.5, 0.1, 0.8, 0.15, 1e4, 0.07, 0.01, 0.02, 4.0, 1.0, 200_000, 5,
        )
        .unwrap();
        // rho -> 0, slope -> -q_w * gamma = -0.4
        assert_abs_diff_eq!(rep.theoretical_slope, -0.4, epsilon = 1e-6);
        assert!((rep.slope - -0.4).abs() < 3.0 * rep.se);
    }

    #[test]
    fn prop1_deterministic_per_seed() {
        let a = verify_prop1_mc(0.5, 0.1, 0.8, 0.15, 0.3, 0.07, 0.01, 0.02, 4.0, 1.0, 100_000, 9)
            .unwrap();
        let b = verify_prop1_mc(0.5, 0.1, 0.8, 0.15, 0.3, 0.07, 0.01, 0.02, 4.0, 1.0, 100_000, 9)
            .unwrap();
        assert_eq!(a.slope.to_bits(), b.slope.to_bits());
        let c = verify_prop1_mc(0.5, 0.1, 0.8, 0.15, 0.3, 0.07, 0.01, 0.02, 4.0, 1.0, 100_000, 10)
            .unwrap();
        assert_ne!(a.slope.to_bits(), c.slope.to_bits());
    }

    #[test]
    fn too_few_paths_rejected() {
        assert!(verify_prop1_mc(0.5, 0.1, 0.8, 0.15, 0.3, 0.07, 0.01, 0.02, 4.0, 1.0, 10_000, 1)
            .is_err());
    }
}
