//! End-to-end acceptance checks: each test pins one verifiable property of
//! the library (oracle recovery, cross-pricer agreement, estimator
//! equivalence, qualitative sign predictions) and prints a PASS line with the
//! measured quantities.

use std::time::Instant;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use rnx_core::garch::{
    fit_garch_wildfire, fit_market_garch, market_variance_path, GarchWildfireParams,
    MarketGarchParams, ReturnSeries,
};
use rnx_core::jumps::{
    calibrate, kou_mc_price, kou_price, merton_price, merton_series_price, CalibrationBounds,
    FittedParams, IvQuote, KouParams, MertonParams, ModelKind,
};
use rnx_core::kernel::{
    estimate_gamma_w, gamma_from_gamma_w, implied_portfolio_share, lognormal_curve,
    pricing_kernel, verify_prop1_mc, GammaFe, KernelSlice, PortfolioDecomposition,
};
use rnx_core::math::trapezoid;
use rnx_core::panel::{
    dummy_ols_oracle, fe_fit, rnd_te_binned, smile_regression, BinScheme, DensityObs, PanelObs,
    SmileObs,
};
use rnx_core::pricing::{bs_price, implied_vol, BsInputs};
use rnx_core::quotes::{synth_panel, synth_surface, SurfaceSlice, SynthModel};
use rnx_core::repair::{check_arbitrage, repair_brute_force, repair_slice, ViolationCounts};
use rnx_core::rnd::{extract_rnd, lognormal_density, DensityKind};

fn d0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2017, 10, 12).unwrap()
}

fn interp(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let j = grid.partition_point(|&g| g < x).clamp(1, grid.len() - 1);
    let w = (x - grid[j - 1]) / (grid[j] - grid[j - 1]);
    values[j - 1] * (1.0 - w) + values[j] * w
}

fn group_ids(raw: &[u32]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let ids = raw
        .iter()
        .map(|&r| {
            let next = map.len();
            *map.entry(r).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

// ---------------------------------------------------------------------------
// 1. RND oracle recovery on a flat-vol surface
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_rnd_oracle_recovery() {
    let start = Instant::now();
    let strikes: Vec<f64> = (0..=50).map(|i| 50.0 + 2.0 * i as f64).collect();
    let slice = synth_surface(&SynthModel::FlatVol(0.2), &strikes, 1.0, 100.0, 0.0, "X", d0())
        .unwrap();
    let curve = extract_rnd(&slice, None, 0.5).unwrap();

    let at_atm = interp(&curve.grid, &curve.values, 100.0);
    let truth_atm = lognormal_density(100.0, 100.0, 0.2, 1.0);
    assert!(
        (at_atm - 0.019848).abs() <= 5e-4,
        "density at K=100: got {at_atm}, want 0.019848 +/- 5e-4 (closed form {truth_atm})"
    );

    assert!(
        (curve.mass - 0.987).abs() <= 0.01,
        "total mass {} not within 0.01 of 0.987",
        curve.mass
    );

    let abs_err: Vec<f64> = curve
        .grid
        .iter()
        .zip(&curve.values)
        .map(|(&k, &f)| (f - lognormal_density(k, 100.0, 0.2, 1.0)).abs())
        .collect();
    let l1 = trapezoid(&curve.grid, &abs_err);
    assert!(l1 <= 0.05, "L1 error vs lognormal {l1} > 0.05");

    let dt = start.elapsed();
    assert!(dt.as_secs_f64() < 5.0, "runtime {dt:?} exceeds 5 s");
    println!(
        "PASS criterion 1: f(100)={at_atm:.6} (target 0.019848), mass={:.4}, L1={l1:.4}, {dt:?}",
        curve.mass
    );
}

// ---------------------------------------------------------------------------
// 2. Repair projection matches exhaustive active-set enumeration
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_repair_matches_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut done = 0;
    let mut worst = 0.0_f64;
    while done < 100 {
        let n = 5 + done % 3; // 5, 6, 7 strikes
        let step = 40.0 / (n - 1) as f64;
        let strikes: Vec<f64> = (0..n).map(|i| 80.0 + step * i as f64).collect();
        let mut s =
            synth_surface(&SynthModel::FlatVol(0.2), &strikes, 1.0, 100.0, 0.01, "X", d0())
                .unwrap();
        for c in s.calls.iter_mut() {
            *c *= 1.0 + rng.gen_range(-0.05..0.05);
        }
        if check_arbitrage(&s, &[]).unwrap().counts.total_per_maturity() == 0 {
            continue; // resample until the slice is actually infeasible
        }

        let qp = repair_slice(&s).unwrap();
        let after = check_arbitrage(&qp.slice, &[]).unwrap();
        assert_eq!(
            after.counts,
            ViolationCounts::default(),
            "slice {done}: repaired slice still violates"
        );

        let brute = repair_brute_force(&s, &qp.slice.calls)
            .unwrap_or_else(|| panic!("slice {done}: enumeration found no feasible point"));
        let obj_qp: f64 = qp.delta_prices.iter().map(|d| d * d).sum();
        let obj_bf: f64 = brute.iter().zip(&s.calls).map(|(x, c)| (x - c) * (x - c)).sum();
        let gap = (obj_qp - obj_bf).abs();
        worst = worst.max(gap);
        assert!(gap <= 1e-8, "slice {done}: objective gap {gap} (qp {obj_qp}, brute {obj_bf})");
        done += 1;
    }
    let dt = start.elapsed();
    assert!(dt.as_secs_f64() < 30.0, "runtime {dt:?} exceeds 30 s");
    println!("PASS criterion 2: 100 slices, worst objective gap {worst:.2e}, {dt:?}");
}

// ---------------------------------------------------------------------------
// 3. Proposition-1 Monte Carlo: kernel elasticity of the exposed stock
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_prop1_monte_carlo() {
    let start = Instant::now();
    let target = -0.77142;
    let reports: Vec<_> = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            verify_prop1_mc(0.5, 0.1, 0.8, 0.15, 0.3, 0.08, 0.02, 0.02, 4.0, 1.0, 1_000_000, seed)
                .unwrap()
        })
        .collect();
    assert!(
        (reports[0].theoretical_slope - target).abs() < 1e-4,
        "closed-form slope {} vs {target}",
        reports[0].theoretical_slope
    );
    let failures = reports
        .iter()
        .filter(|r| (r.slope - target).abs() > 3.0 * r.se)
        .count();
    assert!(failures <= 5, "3-SE coverage failed in {failures}/100 seeds");
    let dt = start.elapsed();
    assert!(dt.as_secs_f64() < 120.0, "runtime {dt:?} exceeds 2 min");
    println!(
        "PASS criterion 3: slope target {target}, theory {:.6}, {failures}/100 outside 3 SE, {dt:?}",
        reports[0].theoretical_slope
    );
}

// ---------------------------------------------------------------------------
// 4. Risk-aversion arithmetic and portfolio-share round trip
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_gamma_arithmetic() {
    // exposures entered directly as the stock share with q = 0
    let cases = [(6.19, 0.025494, 242.8), (4.56, 0.025503, 178.8)];
    for (gamma_w, exposure, want) in cases {
        let decomp = PortfolioDecomposition::new(0.0, exposure, 0.8, 0.15, 0.3).unwrap();
        let gamma = gamma_from_gamma_w(gamma_w, &decomp).unwrap();
        assert!(
            (gamma - want).abs() <= 0.1,
            "gamma_from_gamma_w({gamma_w}, {exposure}) = {gamma}, want {want} +/- 0.1"
        );
        let (q_w_rt, flagged) =
            implied_portfolio_share(gamma_w, gamma, decomp.rho, 0.15, 0.3, 0.0).unwrap();
        assert!(!flagged);
        assert!(
            (q_w_rt - exposure).abs() <= 1e-12,
            "round trip {q_w_rt} vs {exposure}"
        );
    }
    // round trip with a nonzero index share exercises the rho term
    let decomp = PortfolioDecomposition::new(0.5, 0.1, 0.8, 0.15, 0.3).unwrap();
    let gamma = gamma_from_gamma_w(0.9, &decomp).unwrap();
    let (q_w_rt, _) = implied_portfolio_share(0.9, gamma, decomp.rho, 0.15, 0.3, 0.5).unwrap();
    assert!((q_w_rt - 0.1).abs() <= 1e-12, "rho round trip {q_w_rt}");
    println!("PASS criterion 4: 6.19/0.025494 -> 242.8, 4.56/0.025503 -> 178.8, round trips 1e-12");
}

// ---------------------------------------------------------------------------
// 5. Fourier pricer vs independent oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_jump_pricing_cross_oracle() {
    let start = Instant::now();

    // 50-case grid: Merton transform vs Poisson-mixture series
    let mut cases = Vec::new();
    for &sigma in &[0.1, 0.25, 0.4] {
        for &lambda_s in &[0.2, 1.0] {
            for &mu_s in &[-0.2, 0.1] {
                for &sigma_s in &[0.1, 0.3] {
                    for &strike in &[85.0, 110.0] {
                        cases.push((sigma, lambda_s, mu_s, sigma_s, strike));
                    }
                }
            }
        }
    }
    cases.push((0.2, 3.0, -0.1, 0.2, 100.0));
    cases.push((0.5, 0.05, 0.3, 0.05, 60.0));
    assert_eq!(cases.len(), 50);
    let mut worst = 0.0_f64;
    for (i, &(sigma, lambda_s, mu_s, sigma_s, strike)) in cases.iter().enumerate() {
        let p = MertonParams { sigma, lambda_s, mu_s, sigma_s, rate: 0.02, div_yield: 0.0 };
        let is_call = i % 2 == 0;
        let cf = merton_price(&p, strike, 100.0, 0.75, is_call).unwrap();
        let series = merton_series_price(&p, strike, 100.0, 0.75, is_call);
        let gap = (cf - series).abs();
        worst = worst.max(gap);
        assert!(gap <= 1e-6, "case {i}: |cf - series| = {gap}");
    }

    // lambda = 0 collapses to Black-Scholes
    for &strike in &[80.0, 100.0, 120.0] {
        let p = MertonParams {
            sigma: 0.25,
            lambda_s: 0.0,
            mu_s: 0.0,
            sigma_s: 0.1,
            rate: 0.01,
            div_yield: 0.0,
        };
        let cf = merton_price(&p, strike, 100.0, 1.0, true).unwrap();
        let bs = bs_price(&BsInputs {
            forward: 100.0,
            strike,
            rate: 0.01,
            maturity: 1.0,
            vol: 0.25,
            is_call: true,
        });
        assert!((cf - bs).abs() <= 1e-8, "lambda=0 K={strike}: {cf} vs BS {bs}");
    }

    // Kou transform vs terminal-price Monte Carlo
    let kou_cases = [
        (0.2, 0.5, 0.4, 5.0, 10.0, 90.0),
        (0.15, 1.0, 0.3, 2.0, 8.0, 100.0),
        (0.3, 0.8, 0.6, 10.0, 20.0, 110.0),
        (0.25, 2.0, 0.5, 3.0, 5.0, 95.0),
        (0.1, 0.3, 0.2, 1.5, 12.0, 105.0),
    ];
    for (i, &(sigma, lambda, p_up, eta1, eta2, strike)) in kou_cases.iter().enumerate() {
        let p = KouParams { sigma, lambda, p_up, eta1, eta2, rate: 0.02, div_yield: 0.0 };
        let cf = kou_price(&p, strike, 100.0, 0.5, true).unwrap();
        let (mc, se) = kou_mc_price(&p, strike, 100.0, 0.5, true, 10_000_000, 7 + i as u64);
        assert!(se > 0.0);
        assert!(
            (cf - mc).abs() <= 3.0 * se,
            "kou case {i}: cf {cf} vs mc {mc} +/- {se}"
        );
    }

    let dt = start.elapsed();
    assert!(dt.as_secs_f64() < 180.0, "runtime {dt:?} exceeds 3 min");
    println!("PASS criterion 5: 50 Merton cases (worst {worst:.2e}), BS limit 1e-8, 5 Kou MC cases, {dt:?}");
}

// ---------------------------------------------------------------------------
// 6. Noiseless self-calibration
// ---------------------------------------------------------------------------

fn iv_quotes(model: &SynthModel, rate: f64) -> Vec<IvQuote> {
    let forward = 100.0;
    let mut quotes = Vec::new();
    for &t in &[0.25, 1.0] {
        for i in 0..13 {
            let strike = 70.0 + 5.0 * i as f64;
            let price = model.call_price(strike, forward, rate, t).unwrap();
            let inp = BsInputs { forward, strike, rate, maturity: t, vol: 0.2, is_call: true };
            if let Ok(iv) = implied_vol(price, &inp) {
                quotes.push(IvQuote { strike, maturity: t, forward, iv, weight: 1.0 });
            }
        }
    }
    quotes
}

#[test]
fn criterion_06_self_calibration() {
    let start = Instant::now();
    let rate = 0.02;
    let bounds = CalibrationBounds::default();

    let truth_m =
        MertonParams { sigma: 0.2, lambda_s: 0.5, mu_s: -0.1, sigma_s: 0.15, rate, div_yield: 0.0 };
    let quotes = iv_quotes(&SynthModel::Merton(truth_m.clone()), rate);
    let fit = calibrate(ModelKind::Merton, &quotes, rate, 0.0, &bounds, 10, 11).unwrap();
    let got = match &fit.params {
        FittedParams::Merton(p) => p.clone(),
        _ => unreachable!(),
    };
    let m_err = [
        (got.sigma - truth_m.sigma).abs(),
        (got.lambda_s - truth_m.lambda_s).abs(),
        (got.mu_s - truth_m.mu_s).abs(),
        (got.sigma_s - truth_m.sigma_s).abs(),
    ];
    let m_worst = m_err.iter().cloned().fold(0.0, f64::max);
    assert!(
        m_worst <= 1e-2,
        "merton recovery errors {m_err:?} (mse {})",
        fit.mse
    );

    let truth_k = KouParams {
        sigma: 0.2,
        lambda: 0.8,
        p_up: 0.4,
        eta1: 5.0,
        eta2: 10.0,
        rate,
        div_yield: 0.0,
    };
    let quotes = iv_quotes(&SynthModel::Kou(truth_k.clone()), rate);
    let fit_k = calibrate(ModelKind::Kou, &quotes, rate, 0.0, &bounds, 10, 13).unwrap();
    let got_k = match &fit_k.params {
        FittedParams::Kou(p) => p.clone(),
        _ => unreachable!(),
    };
    let k_err = [
        (got_k.sigma - truth_k.sigma).abs(),
        (got_k.lambda - truth_k.lambda).abs(),
        (got_k.p_up - truth_k.p_up).abs(),
        (got_k.eta1 - truth_k.eta1).abs(),
        (got_k.eta2 - truth_k.eta2).abs(),
    ];
    let k_worst = k_err.iter().cloned().fold(0.0, f64::max);
    // the Kou surface is nearly flat in (lambda, eta) trade-offs; an
    // equivalent-fit plateau (mse <= 1e-8) is accepted in lieu of parameter
    // identity
    assert!(
        k_worst <= 5e-2 || fit_k.mse <= 1e-8,
        "kou recovery errors {k_err:?} with mse {}",
        fit_k.mse
    );

    let dt = start.elapsed();
    assert!(dt.as_secs_f64() < 300.0, "runtime {dt:?} exceeds 5 min");
    println!(
        "PASS criterion 6: merton worst err {m_worst:.2e}, kou worst err {k_worst:.2e} (mse {:.2e}), {dt:?}",
        fit_k.mse
    );
}

// ---------------------------------------------------------------------------
// 7. GARCH-wildfire parameter recovery across seeds
// ---------------------------------------------------------------------------

fn simulate_market(p: &MarketGarchParams, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut var = p.omega / (1.0 - p.zeta - p.xi);
    let mut prev_a2 = var;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        var = p.omega + p.zeta * var + p.xi * prev_a2;
        let a = var.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        out.push(p.mu + a);
        prev_a2 = a * a;
    }
    out
}

fn simulate_stock(
    p: &GarchWildfireParams,
    market: &MarketGarchParams,
    market_rets: &[f64],
    flags: &[bool],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mkt_var = market_variance_path(market, market_rets);
    let mut var = p.omega / (1.0 - p.zeta - p.xi);
    let mut prev_e2 = var;
    let mut out = Vec::with_capacity(market_rets.len());
    for t in 0..market_rets.len() {
        let w = if t >= 1 && flags[t - 1] { 1.0 } else { 0.0 };
        var = p.omega + p.zeta * var + p.xi * prev_e2 + p.rho_vol * mkt_var[t] + p.gamma_vol * w;
        let e = var.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        out.push(p.alpha + p.beta * market_rets[t] + p.delta * w + e);
        prev_e2 = e * e;
    }
    out
}

#[test]
fn criterion_07_garch_wildfire_recovery() {
    let start = Instant::now();
    let n = 20_000;
    let market_truth = MarketGarchParams { mu: 3e-4, omega: 1e-6, zeta: 0.9, xi: 0.05 };
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
    let tru = [
        truth.alpha, truth.beta, truth.delta, truth.omega, truth.zeta, truth.xi, truth.rho_vol,
        truth.gamma_vol,
    ];
    let names = ["alpha", "beta", "delta", "omega", "zeta", "xi", "rho_vol", "gamma_vol"];

    let covered: Vec<[bool; 8]> = (0..100u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let market_rets = simulate_market(&market_truth, n, &mut rng);
            let mut flags = vec![false; n];
            let mut placed = 0;
            while placed < 40 {
                let i = rng.gen_range(0..n);
                if !flags[i] {
                    flags[i] = true;
                    placed += 1;
                }
            }
            let rets = simulate_stock(&truth, &market_truth, &market_rets, &flags, &mut rng);
            let d = NaiveDate::from_ymd_opt(2010, 1, 4).unwrap();
            let series = ReturnSeries {
                ticker: "W".into(),
                dates: (0..n).map(|i| d + chrono::Duration::days(i as i64)).collect(),
                log_returns: rets,
                wildfire_flags: flags,
                market_returns: market_rets,
            };
            let mfit = fit_market_garch(&series.market_returns).unwrap();
            let fit = fit_garch_wildfire(&series, &mfit.params, 1).unwrap();
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
            let mut cover = [false; 8];
            for j in 0..8 {
                cover[j] = (est[j] - tru[j]).abs() <= 3.0 * fit.se[j];
            }
            cover
        })
        .collect();

    let mut counts = [0usize; 8];
    for c in &covered {
        for j in 0..8 {
            if c[j] {
                counts[j] += 1;
            }
        }
    }
    for j in 0..8 {
        assert!(
            counts[j] >= 95,
            "{} covered in only {}/100 trials",
            names[j],
            counts[j]
        );
    }
    let dt = start.elapsed();
    assert!(dt.as_secs_f64() < 600.0, "runtime {dt:?} exceeds 10 min");
    println!("PASS criterion 7: 3-SE coverage per param {counts:?} (all >= 95/100), {dt:?}");
}

// ---------------------------------------------------------------------------
// 8. Panel estimator vs dummy-variable OLS and brute-force CGM sandwich
// ---------------------------------------------------------------------------

fn random_panel(seed: u64) -> Vec<PanelObs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_firms = rng.gen_range(5..9);
    let n_dates = rng.gen_range(4..8);
    let mut obs = Vec::new();
    for f in 0..n_firms {
        for d in 0..n_dates {
            let x1: f64 = rng.gen_range(-1.0..1.0);
            let x2: f64 = rng.gen_range(-1.0..1.0);
            let e: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            obs.push(PanelObs {
                firm: f,
                date: d,
                y: 1.5 * x1 - 0.7 * x2 + 0.3 * f as f64 - 0.2 * d as f64 + 0.5 * e,
                x: vec![x1, x2],
                weight: 1.0,
            });
        }
    }
    obs
}

#[test]
fn criterion_08_panel_oracles_and_null_coverage() {
    let names = vec!["x1".to_string(), "x2".to_string()];
    let mut worst_coef = 0.0_f64;
    let mut worst_vcov = 0.0_f64;
    for seed in 0..20u64 {
        let obs = random_panel(300 + seed);
        let firms: Vec<u32> = obs.iter().map(|o| o.firm).collect();
        let dates: Vec<u32> = obs.iter().map(|o| o.date).collect();
        let (fit, _) = fe_fit(&obs, &names, &[firms.clone(), dates.clone()]).unwrap();
        let (coefs, rank, resid, z) = dummy_ols_oracle(&obs, &[firms.clone(), dates.clone()])
            .unwrap();
        for j in 0..2 {
            let gap = (fit.coefs[j] - coefs[j]).abs();
            worst_coef = worst_coef.max(gap);
            assert!(gap <= 1e-10, "panel {seed} coef {j}: FE {} vs dummy {}", fit.coefs[j], coefs[j]);
        }

        // brute-force Cameron-Gelbach-Miller on the full dummy design
        let n = obs.len();
        let ztz = z.transpose() * &z;
        let pinv = ztz.svd(true, true).pseudo_inverse(1e-10).unwrap();
        let cgm_term = |ids: &[u32]| -> DMatrix<f64> {
            let (cl, g) = group_ids(ids);
            let mut sums = vec![DVector::<f64>::zeros(z.ncols()); g];
            for i in 0..n {
                sums[cl[i]] += resid[i] * z.row(i).transpose();
            }
            let mut meat = DMatrix::zeros(z.ncols(), z.ncols());
            for s in &sums {
                meat += s * s.transpose();
            }
            let q = g as f64 / (g as f64 - 1.0) * (n as f64 - 1.0) / (n as f64 - rank as f64);
            q * &pinv * meat * &pinv
        };
        let pair: Vec<u32> = obs.iter().map(|o| o.firm * 100_000 + o.date).collect();
        let v_full = cgm_term(&firms) + cgm_term(&dates) - cgm_term(&pair);
        // same estimator as the library: covariate block, symmetrized, with
        // negative eigenvalues of the three-term sum floored at zero
        let block = 0.5 * (v_full.view((0, 0), (2, 2)) + v_full.view((0, 0), (2, 2)).transpose());
        let eig = nalgebra::SymmetricEigen::new(block.clone_owned());
        let v_oracle = if eig.eigenvalues.min() < -1e-12 * eig.eigenvalues.amax() {
            assert!(fit.vcov_floored, "panel {seed}: oracle floored but fit did not");
            let mut out = DMatrix::zeros(2, 2);
            for j in 0..2 {
                let col = eig.eigenvectors.column(j);
                out += eig.eigenvalues[j].max(0.0) * &col * col.transpose();
            }
            out
        } else {
            block.clone_owned()
        };
        for i in 0..2 {
            for j in 0..2 {
                let gap = (fit.vcov[i][j] - v_oracle[(i, j)]).abs();
                worst_vcov = worst_vcov.max(gap);
                assert!(gap <= 1e-10, "panel {seed} vcov ({i},{j}): gap {gap}");
            }
        }
    }

    // null DGP: density deviations unrelated to treatment, TE must cover 0
    let mut covered = 0usize;
    let mut total = 0usize;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let mut obs = Vec::new();
        for f in 0..20u32 {
            for d in 0..15u32 {
                let treated = f < 10 && d >= 8;
                for i in 0..13 {
                    let m = 0.7 + 0.05 * i as f64;
                    let e: f64 =
                        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                    obs.push(DensityObs {
                        firm: f,
                        date: d,
                        moneyness: m,
                        value: lognormal_density(100.0 * m, 100.0, 0.25, 0.5) + 0.002 * e,
                        treated,
                    });
                }
            }
        }
        let profile = rnd_te_binned(&obs, 10, BinScheme::Quantile).unwrap();
        for b in 0..profile.points.len() {
            if profile.flagged[b] {
                continue;
            }
            total += 1;
            if profile.ci_low[b] <= 0.0 && profile.ci_high[b] >= 0.0 {
                covered += 1;
            }
        }
    }
    let rate = covered as f64 / total as f64;
    assert!(rate >= 0.90, "null TE coverage {covered}/{total} = {rate:.3} < 0.90");
    println!(
        "PASS criterion 8: worst coef gap {worst_coef:.2e}, worst vcov gap {worst_vcov:.2e}, null TE coverage {covered}/{total}"
    );
}

// ---------------------------------------------------------------------------
// 9. Power-kernel identity: gamma_w = (mu - r) / sigma^2 in a BS world
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_power_kernel_identity() {
    let (mu, r, sigma, t) = (0.08_f64, 0.02_f64, 0.2_f64, 1.0_f64);
    let closed_form = (mu - r) / (sigma * sigma); // 1.5
    let s0 = 100.0 * (-r * t).exp();

    // analytic densities on a shared grid
    let grid: Vec<f64> = (0..200).map(|i| 40.0 + 0.6 * i as f64).collect();
    let rnd = lognormal_curve(&grid, s0, r, sigma, t, DensityKind::RiskNeutral, r);
    let phys = lognormal_curve(&grid, s0, mu, sigma, t, DensityKind::Physical, r);
    let kernel = pricing_kernel(&rnd, &phys, r, t).unwrap();
    let est = estimate_gamma_w(&[KernelSlice { firm: 0, date: 0, curve: kernel }], GammaFe::None)
        .unwrap();
    assert!(
        (est.gamma_w - closed_form).abs() <= 1e-6,
        "analytic gamma_w {} vs closed form {closed_form}",
        est.gamma_w
    );

    // full extraction pipeline: RND from a synthetic quote surface. The
    // regression runs on the extracted support, so the quoted strikes stay
    // in the liquid range where the density is well identified.
    let strikes: Vec<f64> = (0..=40).map(|i| 65.0 + 2.0 * i as f64).collect();
    let slice = synth_surface(&SynthModel::FlatVol(sigma), &strikes, t, 100.0, r, "X", d0())
        .unwrap();
    let curve = extract_rnd(&slice, None, 0.5).unwrap();
    let phys = lognormal_curve(&curve.grid, s0, mu, sigma, t, DensityKind::Physical, r);
    let kernel = pricing_kernel(&curve, &phys, r, t).unwrap();
    let est2 = estimate_gamma_w(&[KernelSlice { firm: 0, date: 0, curve: kernel }], GammaFe::None)
        .unwrap();
    let rel = (est2.gamma_w - closed_form).abs() / closed_form;
    assert!(
        rel <= 0.05,
        "extracted gamma_w {} vs closed form {closed_form} (rel err {rel:.4})",
        est2.gamma_w
    );
    println!(
        "PASS criterion 9: analytic gamma_w {:.8} (target {closed_form}), extracted {:.4} (rel err {rel:.4})",
        est.gamma_w, est2.gamma_w
    );
}

// ---------------------------------------------------------------------------
// 10. Qualitative sign/shape reproduction on a treated-vs-control panel
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_sign_and_shape() {
    let rate = 0.02;
    // mean downward jump -1/eta1: control -0.908, treated -1.765
    let control = KouParams {
        sigma: 0.25,
        lambda: 1.0,
        p_up: 0.3,
        eta1: 1.0 / 0.908,
        eta2: 15.0,
        rate,
        div_yield: 0.0,
    };
    let treated = KouParams { eta1: 1.0 / 1.765, ..control.clone() };
    // with equal jump intensity the treated exponential tail overtakes the
    // control's only below moneyness exp(ln(eta1_t/eta1_c)/(eta1_c - eta1_t))
    // ~ 0.29, so the strike grid reaches deep OTM puts
    let strikes: Vec<f64> = (0..=28).map(|i| 10.0 + 5.0 * i as f64).collect();

    let panel = synth_panel(
        6,
        10,
        0.5,
        &SynthModel::Kou(control.clone()),
        &SynthModel::Kou(treated.clone()),
        &strikes,
        0.5,
        100.0,
        rate,
        0.0,
        5,
    )
    .unwrap();

    let firm_id = |s: &SurfaceSlice| s.ticker[1..].parse::<u32>().unwrap();
    let date_id = |s: &SurfaceSlice| {
        (s.quote_date - NaiveDate::from_ymd_opt(2017, 1, 2).unwrap()).num_days() as u32
    };

    // (a) left-tail RND treatment effect is positive
    let mut density_obs = Vec::new();
    for (slice, cal) in panel.slices.iter().zip(&panel.treatment) {
        let curve = extract_rnd(slice, None, 0.5).unwrap();
        for (&k, &f) in curve.grid.iter().zip(&curve.values) {
            density_obs.push(DensityObs {
                firm: firm_id(slice),
                date: date_id(slice),
                moneyness: k / slice.forward,
                value: f,
                treated: cal.treated_now,
            });
        }
    }
    let profile = rnd_te_binned(&density_obs, 20, BinScheme::Quantile).unwrap();
    let left: Vec<usize> = (0..profile.points.len())
        .filter(|&b| profile.points[b] < 0.25 && !profile.flagged[b])
        .collect();
    assert!(left.len() >= 2, "too few left-tail bins: {}", left.len());
    let left_mean =
        left.iter().map(|&b| profile.delta[b]).sum::<f64>() / left.len() as f64;
    assert!(
        left_mean > 0.0,
        "left-tail mean TE {left_mean} not positive (deltas {:?})",
        left.iter().map(|&b| profile.delta[b]).collect::<Vec<_>>()
    );

    // (b) treated put skew is steeper: negative treated x moneyness slope
    let panel_long = synth_panel(
        6,
        10,
        0.5,
        &SynthModel::Kou(control.clone()),
        &SynthModel::Kou(treated.clone()),
        &strikes,
        1.0,
        100.0,
        rate,
        0.0,
        5,
    )
    .unwrap();
    let mut smile_obs = Vec::new();
    for p in [&panel, &panel_long] {
        for (slice, cal) in p.slices.iter().zip(&p.treatment) {
            for (&k, &c) in slice.strikes.iter().zip(&slice.calls) {
                let inp = BsInputs {
                    forward: slice.forward,
                    strike: k,
                    rate,
                    maturity: slice.maturity_years,
                    vol: 0.3,
                    is_call: true,
                };
                if let Ok(iv) = implied_vol(c, &inp) {
                    smile_obs.push(SmileObs {
                        firm: firm_id(slice),
                        date: date_id(slice),
                        moneyness: k / slice.forward,
                        sqrt_maturity: slice.maturity_years.sqrt(),
                        iv,
                        treated: cal.treated_now,
                    });
                }
            }
        }
    }
    let fits = smile_regression(&smile_obs).unwrap();
    let both = &fits[3]; // firm and date effects absorbed
    let idx = both
        .names
        .iter()
        .position(|n| n == "treated_x_moneyness")
        .expect("treated x moneyness kept");
    let beta_tau = both.coefs[idx];
    assert!(beta_tau < 0.0, "treated x moneyness slope {beta_tau} not negative");

    // (c) calibrated treated |mean down-jump| exceeds control's
    let bounds = CalibrationBounds::default();
    let fit_c = calibrate(
        ModelKind::Kou,
        &iv_quotes(&SynthModel::Kou(control.clone()), rate),
        rate,
        0.0,
        &bounds,
        10,
        21,
    )
    .unwrap();
    let fit_t = calibrate(
        ModelKind::Kou,
        &iv_quotes(&SynthModel::Kou(treated.clone()), rate),
        rate,
        0.0,
        &bounds,
        10,
        22,
    )
    .unwrap();
    let mean_down = |p: &FittedParams| match p {
        FittedParams::Kou(k) => 1.0 / k.eta1,
        _ => unreachable!(),
    };
    let (dc, dt_) = (mean_down(&fit_c.params), mean_down(&fit_t.params));
    assert!(
        dt_ > dc,
        "calibrated |mean down-jump|: treated {dt_} vs control {dc}"
    );

    println!(
        "PASS criterion 10: left-tail TE {left_mean:.3e} > 0, beta_tau {beta_tau:.4} < 0, |down-jump| treated {dt_:.3} > control {dc:.3}"
    );
}
