//! Fixed-effects panel estimators: alternating-demeaning absorption with
//! double-clustered (firm and date) covariance, binned and kernel-weighted
//! treatment-effect profiles on densities, smile regressions, permanent
//! (post-event) effect regressions, and the two-dimensional FWL surface.
//!
//! Absorption is by iterated weighted within-group demeaning (converged when
//! every group's demeaned mean is ≤ 1e-10 in magnitude), which reproduces
//! full dummy-variable OLS coefficients. The double-clustered covariance is
//! the three-term combination V_firm + V_date − V_firm∩date, each term with
//! finite-sample scaling C/(C−1)·(N−1)/(N−K) where K counts the rank of the
//! full dummy design; negative eigenvalues of the combination are floored at
//! zero and flagged.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelObs {
    pub firm: u32,
    pub date: u32,
    pub y: f64,
    pub x: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FEResult {
    /// Kept covariate names, aligned with `coefs`.
    pub names: Vec<String>,
    pub coefs: Vec<f64>,
    /// Double-clustered covariance of `coefs`.
    pub vcov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub n: usize,
    pub n_firms: usize,
    pub n_dates: usize,
    pub r2_within: f64,
    /// Covariates dropped for collinearity after demeaning.
    pub dropped: Vec<String>,
    /// True when the three-term covariance needed eigenvalue flooring.
    pub vcov_floored: bool,
}

/// Retained internals for covariance computation and diagnostics.
pub struct FitInternals {
    /// Demeaned kept covariates (unweighted values).
    pub xd: DMatrix<f64>,
    pub resid: DVector<f64>,
    pub weights: DVector<f64>,
    pub firm: Vec<u32>,
    pub date: Vec<u32>,
    /// (X'WX)^{-1} on the demeaned kept covariates.
    pub xtx_inv: DMatrix<f64>,
    /// Rank of the full dummy design (kept covariates + absorbed effects).
    pub k_full: usize,
}

fn group_ids(values: &[u32]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let ids: Vec<usize> = values
        .iter()
        .map(|v| {
            let next = map.len();
            *map.entry(*v).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

/// Weighted within-group demeaning of several columns, alternating over
/// factors until every group mean is ≤ 1e-12 (comfortably inside the 1e-10
/// contract).
fn demean(cols: &mut [Vec<f64>], w: &[f64], factors: &[(Vec<usize>, usize)]) -> usize {
    let mut iters = 0;
    for _ in 0..500 {
        iters += 1;
        let mut max_mean = 0.0_f64;
        for (ids, n_groups) in factors {
            let mut sums = vec![0.0; *n_groups];
            let mut wsum = vec![0.0; *n_groups];
            for col in cols.iter_mut() {
                sums.iter_mut().for_each(|s| *s = 0.0);
                wsum.iter_mut().for_each(|s| *s = 0.0);
                for (i, &g) in ids.iter().enumerate() {
                    sums[g] += w[i] * col[i];
                    wsum[g] += w[i];
                }
                for g in 0..*n_groups {
                    if wsum[g] > 0.0 {
                        sums[g] /= wsum[g];
                        max_mean = max_mean.max(sums[g].abs());
                    }
                }
                for (i, &g) in ids.iter().enumerate() {
                    col[i] -= sums[g];
                }
            }
        }
        if max_mean <= 1e-12 {
            break;
        }
    }
    iters
}

/// Greedy independent-column selection under weights (for collinearity
/// drops); returns kept column indices.
fn independent_columns(cols: &[Vec<f64>], w: &[f64]) -> Vec<usize> {
    let n = w.len();
    let mut kept: Vec<usize> = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new(); // weighted, orthonormalized
    for (j, col) in cols.iter().enumerate() {
        let mut v: Vec<f64> = (0..n).map(|i| w[i].sqrt() * col[i]).collect();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 < 1e-12 {
            continue;
        }
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 * norm0.max(1.0) {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis.push(v);
            kept.push(j);
        }
    }
    kept
}

/// Rank of the absorbed dummy block: exact for the first two factors via the
/// connected components of their bipartite graph; each further factor is
/// assumed to add G−1 independent columns (generic position).
fn absorbed_rank(factors: &[(Vec<usize>, usize)]) -> usize {
    match factors.len() {
        0 => 0,
        1 => factors[0].1,
        _ => {
            let (f1, g1) = &factors[0];
            let (f2, g2) = &factors[1];
            // union-find over g1 + g2 nodes
            let mut parent: Vec<usize> = (0..g1 + g2).collect();
            fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
                while parent[i] != i {
                    parent[i] = parent[parent[i]];
                    i = parent[i];
                }
                i
            }
            for i in 0..f1.len() {
                let a = find(&mut parent, f1[i]);
                let b = find(&mut parent, g1 + f2[i]);
                parent[a] = b;
            }
            let mut roots: Vec<usize> = (0..g1 + g2).map(|i| find(&mut parent, i)).collect();
            roots.sort_unstable();
            roots.dedup();
            let components = roots.len();
            let mut rank = g1 + g2 - components;
            for (_, g) in &factors[2..] {
                rank += g - 1;
            }
            rank
        }
    }
}

/// Absorb the given factors and run weighted OLS on the demeaned data.
/// `factors` are per-observation raw group labels (any u32 coding).
pub fn fe_fit(
    obs: &[PanelObs],
    names: &[String],
    absorb: &[Vec<u32>],
) -> Result<(FEResult, FitInternals)> {
    let n = obs.len();
    let k_in = names.len();
    if n < k_in + 2 {
        return Err(Error::Data(format!("too few observations: {n} for {k_in} covariates")));
    }
    if obs.iter().any(|o| o.x.len() != k_in) {
        return Err(Error::Data("covariate vector length mismatch".into()));
    }
    if obs.iter().any(|o| !o.y.is_finite() || o.weight < 0.0 || o.x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Data("non-finite outcome/covariate or negative weight".into()));
    }
    let (firm_ids, n_firms) = group_ids(&obs.iter().map(|o| o.firm).collect::<Vec<_>>());
    let (date_ids, n_dates) = group_ids(&obs.iter().map(|o| o.date).collect::<Vec<_>>());
    if n_firms < 2 || n_dates < 2 {
        return Err(Error::Data(format!("need >= 2 firms and >= 2 dates, got {n_firms}/{n_dates}")));
    }

    let w: Vec<f64> = obs.iter().map(|o| o.weight).collect();
    let factors: Vec<(Vec<usize>, usize)> = absorb
        .iter()
        .map(|f| {
            if f.len() != n {
                return Err(Error::Data("absorb factor length mismatch".into()));
            }
            Ok(group_ids(f))
        })
        .collect::<Result<_>>()?;

    // demean outcome and covariates jointly
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k_in + 1);
    cols.push(obs.iter().map(|o| o.y).collect());
    for j in 0..k_in {
        cols.push(obs.iter().map(|o| o.x[j]).collect());
    }
    demean(&mut cols, &w, &factors);
    let yd = cols.remove(0);

    let kept = independent_columns(&cols, &w);
    let dropped: Vec<String> = (0..k_in).filter(|j| !kept.contains(j)).map(|j| names[j].clone()).collect();
    let k = kept.len();
    if k == 0 {
        return Err(Error::Collinear("all covariates absorbed by fixed effects".into()));
    }

    let xd = DMatrix::from_fn(n, k, |i, j| cols[kept[j]][i]);
    let wv = DVector::from_vec(w.clone());
    let ydv = DVector::from_vec(yd);

    let mut xtwx = DMatrix::zeros(k, k);
    let mut xtwy = DVector::zeros(k);
    for i in 0..n {
        let xi = xd.row(i).transpose();
        xtwx += w[i] * &xi * xi.transpose();
        xtwy += w[i] * ydv[i] * xi;
    }
    let xtx_inv = xtwx
        .try_inverse()
        .ok_or_else(|| Error::Collinear("demeaned design is singular".into()))?;
    let coefs_v = &xtx_inv * xtwy;
    let resid = &ydv - &xd * &coefs_v;

    let tss: f64 = (0..n).map(|i| w[i] * ydv[i] * ydv[i]).sum();
    let rss: f64 = (0..n).map(|i| w[i] * resid[i] * resid[i]).sum();
    let r2_within = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };

    let k_full = k + absorbed_rank(&factors);
    let internals = FitInternals {
        xd,
        resid,
        weights: wv,
        firm: obs.iter().map(|o| o.firm).collect(),
        date: obs.iter().map(|o| o.date).collect(),
        xtx_inv,
        k_full,
    };
    let (vcov, floored) = dcluster_cov(&internals)?;
    let se: Vec<f64> = (0..k).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect();
    let result = FEResult {
        names: kept.iter().map(|&j| names[j].clone()).collect(),
        coefs: coefs_v.iter().copied().collect(),
        vcov: (0..k).map(|i| (0..k).map(|j| vcov[(i, j)]).collect()).collect(),
        se,
        n,
        n_firms,
        n_dates,
        r2_within,
        dropped,
        vcov_floored: floored,
    };
    let _ = firm_ids;
    let _ = date_ids;
    Ok((result, internals))
}

fn cluster_meat(int: &FitInternals, cluster: &[usize], n_clusters: usize) -> DMatrix<f64> {
    let k = int.xd.ncols();
    let mut sums = vec![DVector::<f64>::zeros(k); n_clusters];
    for i in 0..int.xd.nrows() {
        let s = int.weights[i] * int.resid[i];
        let xi = int.xd.row(i).transpose();
        sums[cluster[i]] += s * xi;
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in &sums {
        meat += s * s.transpose();
    }
    meat
}

/// Cameron–Gelbach–Miller double-clustered covariance from retained fit
/// internals. Returns the covariance and whether eigenvalue flooring fired.
pub fn dcluster_cov(int: &FitInternals) -> Result<(DMatrix<f64>, bool)> {
    let n = int.xd.nrows() as f64;
    let k_full = int.k_full as f64;
    let (firm_ids, n_firms) = group_ids(&int.firm);
    let (date_ids, n_dates) = group_ids(&int.date);
    if n_firms < 2 || n_dates < 2 {
        return Err(Error::Data("clustering needs >= 2 clusters in each dimension".into()));
    }
    let pair: Vec<u32> = int
        .firm
        .iter()
        .zip(&int.date)
        .map(|(&f, &d)| (f as u64) << 32 | d as u64)
        .map(|p| {
            // stable compact label
            (p % (u32::MAX as u64)) as u32 ^ (p >> 32) as u32
        })
        .collect();
    // build exact pair ids instead of the hash above to avoid collisions
    let mut pair_map: HashMap<(u32, u32), usize> = HashMap::new();
    let pair_ids: Vec<usize> = int
        .firm
        .iter()
        .zip(&int.date)
        .map(|(&f, &d)| {
            let next = pair_map.len();
            *pair_map.entry((f, d)).or_insert(next)
        })
        .collect();
    let _ = pair;
    let n_pairs = pair_map.len();

    let scale = |c: usize| {
        let c = c as f64;
        c / (c - 1.0) * (n - 1.0) / (n - k_full)
    };
    let sandwich = |ids: &[usize], groups: usize| -> DMatrix<f64> {
        let meat = cluster_meat(int, ids, groups);
        scale(groups) * &int.xtx_inv * meat * &int.xtx_inv
    };
    let v_firm = sandwich(&firm_ids, n_firms);
    let v_date = sandwich(&date_ids, n_dates);
    let v_pair = if n_pairs > 1 {
        sandwich(&pair_ids, n_pairs)
    } else {
        return Err(Error::Data("only one firm-date intersection cluster".into()));
    };
    let v = v_firm + v_date - v_pair;

    // symmetrize and floor negative eigenvalues at zero
    let k = v.ncols();
    let sym = 0.5 * (&v + v.transpose());
    let eig = nalgebra::SymmetricEigen::new(sym.clone());
    let min_eig = eig.eigenvalues.min();
    if min_eig < -1e-12 * eig.eigenvalues.amax().max(1e-300) {
        let floored_vals = eig.eigenvalues.map(|e| e.max(0.0));
        let q = eig.eigenvectors;
        let mut out = DMatrix::zeros(k, k);
        for j in 0..k {
            let col = q.column(j);
            out += floored_vals[j] * &col * col.transpose();
        }
        Ok((out, true))
    } else {
        Ok((sym, false))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TEProfile {
    /// Bin centers or evaluation points (moneyness).
    pub points: Vec<f64>,
    pub delta: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    /// Per-point flags (merged bin / sparse evaluation point).
    pub flagged: Vec<bool>,
}

/// One density observation of the treatment panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityObs {
    pub firm: u32,
    pub date: u32,
    pub moneyness: f64,
    pub value: f64,
    pub treated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinScheme {
    /// Equal-count bins on the pooled moneyness distribution.
    Quantile,
    /// Equal-width bins spanning the observed moneyness range.
    EqualWidth,
}

/// Binned treatment-effect profile: density regressed on treated×bin
/// interactions with firm×bin and date effects absorbed.
pub fn rnd_te_binned(obs: &[DensityObs], n_bins: usize, scheme: BinScheme) -> Result<TEProfile> {
    if n_bins < 2 {
        return Err(Error::Parameter("need at least 2 bins".into()));
    }
    if obs.is_empty() {
        return Err(Error::Data("empty density panel".into()));
    }
    let obs = sort_density(obs);
    let obs = &obs[..];
    let mut ms: Vec<f64> = obs.iter().map(|o| o.moneyness).collect();
    ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let edges: Vec<f64> = match scheme {
        BinScheme::Quantile => (1..n_bins)
            .map(|b| ms[(b * ms.len()) / n_bins])
            .collect(),
        BinScheme::EqualWidth => {
            let (lo, hi) = (ms[0], ms[ms.len() - 1]);
            (1..n_bins).map(|b| lo + (hi - lo) * b as f64 / n_bins as f64).collect()
        }
    };
    let bin_of = |m: f64| edges.partition_point(|&e| e <= m);

    // merge empty bins with their left neighbor
    let mut counts = vec![0usize; n_bins];
    for o in obs {
        counts[bin_of(o.moneyness)] += 1;
    }
    let mut remap = vec![0usize; n_bins];
    let mut merged_flag = vec![false; n_bins];
    let mut cur = 0usize;
    for b in 0..n_bins {
        if counts[b] == 0 {
            merged_flag[cur.min(n_bins - 1)] = true;
            remap[b] = cur.saturating_sub(0).min(n_bins - 1).min(cur);
            remap[b] = if b == 0 { 0 } else { remap[b - 1] };
            continue;
        }
        remap[b] = cur;
        cur += 1;
    }
    let eff_bins = cur.max(1);

    let mut bin_sum = vec![0.0; eff_bins];
    let mut bin_n = vec![0usize; eff_bins];
    let panel: Vec<PanelObs> = obs
        .iter()
        .map(|o| {
            let b = remap[bin_of(o.moneyness)];
            bin_sum[b] += o.moneyness;
            bin_n[b] += 1;
            let mut x = vec![0.0; eff_bins];
            if o.treated {
                x[b] = 1.0;
            }
            PanelObs {
                firm: o.firm,
                date: o.date,
                y: o.value,
                x,
                weight: 1.0,
            }
        })
        .collect();
    let names: Vec<String> = (0..eff_bins).map(|b| format!("treated_x_bin{b}")).collect();
    // firm×bin and date absorption
    let firm_bin: Vec<u32> = obs
        .iter()
        .map(|o| o.firm * n_bins as u32 + remap[bin_of(o.moneyness)] as u32)
        .collect();
    let dates: Vec<u32> = obs.iter().map(|o| o.date).collect();
    let (fit, _) = fe_fit(&panel, &names, &[firm_bin, dates])?;

    // map kept coefficients back to bins (dropped bins are flagged)
    let mut delta = vec![f64::NAN; eff_bins];
    let mut se = vec![f64::NAN; eff_bins];
    for (name, (&c, &s)) in fit.names.iter().zip(fit.coefs.iter().zip(&fit.se)) {
        let b: usize = name.trim_start_matches("treated_x_bin").parse().unwrap();
        delta[b] = c;
        se[b] = s;
    }
    let points: Vec<f64> = (0..eff_bins).map(|b| bin_sum[b] / bin_n[b].max(1) as f64).collect();
    let flagged: Vec<bool> = (0..eff_bins).map(|b| delta[b].is_nan() || merged_flag[b]).collect();
    Ok(TEProfile {
        ci_low: delta.iter().zip(&se).map(|(d, s)| d - 1.96 * s).collect(),
        ci_high: delta.iter().zip(&se).map(|(d, s)| d + 1.96 * s).collect(),
        points,
        delta,
        se,
        flagged,
    })
}

/// Kernel-weighted treatment-effect profile: at each evaluation moneyness,
/// a Gaussian-weighted two-way FE regression of density on treated.
/// Bandwidth is in moneyness units. Points with Kish effective sample < 30
/// are flagged.
pub fn rnd_te_kernel(obs: &[DensityObs], eval_points: &[f64], bandwidth: f64) -> Result<TEProfile> {
    if bandwidth <= 0.0 {
        return Err(Error::Parameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let obs = sort_density(obs);
    let obs = &obs[..];
    let names = vec!["treated".to_string()];
    let mut delta = Vec::new();
    let mut se = Vec::new();
    let mut flagged = Vec::new();
    for &m0 in eval_points {
        let panel: Vec<PanelObs> = obs
            .iter()
            .map(|o| PanelObs {
                firm: o.firm,
                date: o.date,
                y: o.value,
                x: vec![if o.treated { 1.0 } else { 0.0 }],
                weight: crate::math::norm_pdf((o.moneyness - m0) / bandwidth),
            })
            .collect();
        let wsum: f64 = panel.iter().map(|p| p.weight).sum();
        let w2sum: f64 = panel.iter().map(|p| p.weight * p.weight).sum();
        let eff_n = if w2sum > 0.0 { wsum * wsum / w2sum } else { 0.0 };
        if eff_n < 30.0 {
            delta.push(f64::NAN);
            se.push(f64::NAN);
            flagged.push(true);
            continue;
        }
        let firms: Vec<u32> = obs.iter().map(|o| o.firm).collect();
        let dates: Vec<u32> = obs.iter().map(|o| o.date).collect();
        match fe_fit(&panel, &names, &[firms, dates]) {
            Ok((fit, _)) if !fit.coefs.is_empty() => {
                delta.push(fit.coefs[0]);
                se.push(fit.se[0]);
                flagged.push(false);
            }
            _ => {
                delta.push(f64::NAN);
                se.push(f64::NAN);
                flagged.push(true);
            }
        }
    }
    Ok(TEProfile {
        points: eval_points.to_vec(),
        ci_low: delta.iter().zip(&se).map(|(d, s)| d - 1.96 * s).collect(),
        ci_high: delta.iter().zip(&se).map(|(d, s)| d + 1.96 * s).collect(),
        delta,
        se,
        flagged,
    })
}

/// One implied-volatility observation of the smile panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmileObs {
    pub firm: u32,
    pub date: u32,
    pub moneyness: f64,
    pub sqrt_maturity: f64,
    pub iv: f64,
    pub treated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeSpec {
    None,
    Firm,
    Date,
    Both,
}

/// Internal sort by (firm, date, moneyness) so estimator output does not
/// depend on input row order.
fn sort_density(obs: &[DensityObs]) -> Vec<DensityObs> {
    let mut v = obs.to_vec();
    v.sort_by(|a, b| {
        (a.firm, a.date)
            .cmp(&(b.firm, b.date))
            .then(a.moneyness.partial_cmp(&b.moneyness).unwrap_or(std::cmp::Ordering::Equal))
    });
    v
}

fn sort_smile(obs: &[SmileObs]) -> Vec<SmileObs> {
    let mut v = obs.to_vec();
    v.sort_by(|a, b| {
        (a.firm, a.date)
            .cmp(&(b.firm, b.date))
            .then(a.moneyness.partial_cmp(&b.moneyness).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.sqrt_maturity.partial_cmp(&b.sqrt_maturity).unwrap_or(std::cmp::Ordering::Equal))
    });
    v
}

fn smile_panel(obs: &[SmileObs], flag: impl Fn(&SmileObs) -> bool) -> (Vec<PanelObs>, Vec<String>, bool) {
    let any_treated = obs.iter().any(&flag);
    let mut names = vec![
        "moneyness".to_string(),
        "sqrt_maturity".to_string(),
        "moneyness_x_sqrt_maturity".to_string(),
    ];
    if any_treated {
        names.extend([
            "treated".to_string(),
            "treated_x_moneyness".to_string(),
            "treated_x_sqrt_maturity".to_string(),
            "treated_x_moneyness_x_sqrt_maturity".to_string(),
        ]);
    }
    let panel = obs
        .iter()
        .map(|o| {
            let t = if flag(o) { 1.0 } else { 0.0 };
            let mut x = vec![o.moneyness, o.sqrt_maturity, o.moneyness * o.sqrt_maturity];
            if any_treated {
                x.extend([
                    t,
                    t * o.moneyness,
                    t * o.sqrt_maturity,
                    t * o.moneyness * o.sqrt_maturity,
                ]);
            }
            PanelObs { firm: o.firm, date: o.date, y: o.iv, x, weight: 1.0 }
        })
        .collect();
    (panel, names, any_treated)
}

fn run_spec(panel: &[PanelObs], names: &[String], spec: FeSpec) -> Result<FEResult> {
    let firms: Vec<u32> = panel.iter().map(|o| o.firm).collect();
    let dates: Vec<u32> = panel.iter().map(|o| o.date).collect();
    let ones = vec![0u32; panel.len()];
    // intercept is absorbed by a constant "factor" when no FE on a margin
    let absorb: Vec<Vec<u32>> = match spec {
        FeSpec::None => vec![ones.clone(), ones],
        FeSpec::Firm => vec![firms, ones],
        FeSpec::Date => vec![ones, dates],
        FeSpec::Both => vec![firms, dates],
    };
    fe_fit(panel, names, &absorb).map(|(r, _)| r)
}

/// Smile regressions in the four fixed-effect specifications
/// (none / firm / date / both), current-treatment interactions.
pub fn smile_regression(obs: &[SmileObs]) -> Result<Vec<FEResult>> {
    let obs = sort_smile(obs);
    let (panel, names, _) = smile_panel(&obs, |o| o.treated);
    [FeSpec::None, FeSpec::Firm, FeSpec::Date, FeSpec::Both]
        .into_iter()
        .map(|s| run_spec(&panel, &names, s))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermanentObs {
    pub firm: u32,
    pub date: u32,
    pub moneyness: f64,
    pub sqrt_maturity: f64,
    pub iv: f64,
    pub after_first: bool,
    pub after_last: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersistentFlag {
    AfterFirst,
    AfterLast,
}

/// Permanent-effect regressions: the smile specification with the chosen
/// persistent exposure flag in place of current treatment.
pub fn permanent_effect_regression(obs: &[PermanentObs], flag: PersistentFlag) -> Result<Vec<FEResult>> {
    let smile: Vec<SmileObs> = obs
        .iter()
        .map(|o| SmileObs {
            firm: o.firm,
            date: o.date,
            moneyness: o.moneyness,
            sqrt_maturity: o.sqrt_maturity,
            iv: o.iv,
            treated: match flag {
                PersistentFlag::AfterFirst => o.after_first,
                PersistentFlag::AfterLast => o.after_last,
            },
        })
        .collect();
    smile_regression(&smile)
}

/// Maturity (in days) at which a persistent moneyness-slope effect is offset
/// by its maturity interaction: (slope / interaction)², per the crossover
/// arithmetic used with Table-3-style coefficients.
pub fn crossover_maturity_days(slope: f64, interaction: f64) -> f64 {
    (slope / interaction).powi(2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FwlSurface {
    pub moneyness: Vec<f64>,
    pub maturity: Vec<f64>,
    /// Control-group surface g (rows: maturity, cols: moneyness).
    pub control: Vec<Vec<f64>>,
    /// Treated-minus-control difference.
    pub delta: Vec<Vec<f64>>,
    /// Sparse cells (effective local sample < 30).
    pub flagged: Vec<Vec<bool>>,
    /// Second-stage coefficients when the fit is forced global-linear
    /// (names aligned): moneyness, sqrt_maturity, treated, treated
    /// interactions.
    pub linear_coefs: Option<(Vec<String>, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FwlMode {
    /// Degree-2 local polynomial per treatment group; bandwidth in
    /// moneyness units (√maturity rescaled by its sample SD).
    LocalPoly { bandwidth: f64 },
    /// Global linear second stage with regressors demeaned alongside the
    /// outcome; by the FWL theorem this reproduces the two-way FE fit.
    GlobalLinear,
}

/// FWL two-stage surface: demean IVs on firm and date effects, then fit the
/// second stage per `mode` and difference treated against control.
pub fn fwl_surface(
    obs: &[SmileObs],
    m_grid: &[f64],
    t_grid: &[f64],
    mode: FwlMode,
) -> Result<FwlSurface> {
    let bandwidth = match mode {
        FwlMode::LocalPoly { bandwidth } if bandwidth <= 0.0 => {
            return Err(Error::Parameter("bandwidth must be positive".into()));
        }
        FwlMode::LocalPoly { bandwidth } => bandwidth,
        FwlMode::GlobalLinear => 0.0,
    };
    let n = obs.len();
    if n < 100 {
        return Err(Error::Data(format!("need a reasonable panel, got {n} observations")));
    }
    let obs = sort_smile(obs);
    let obs = &obs[..];
    // orthogonalize IV on firm and date effects
    let w = vec![1.0; n];
    let factors = vec![
        group_ids(&obs.iter().map(|o| o.firm).collect::<Vec<_>>()),
        group_ids(&obs.iter().map(|o| o.date).collect::<Vec<_>>()),
    ];
    if mode == FwlMode::GlobalLinear {
        // demean outcome and regressors, then one OLS (FWL theorem path)
        let names = vec![
            "moneyness".to_string(),
            "sqrt_maturity".to_string(),
            "treated".to_string(),
            "treated_x_moneyness".to_string(),
            "treated_x_sqrt_maturity".to_string(),
        ];
        let mut cols: Vec<Vec<f64>> = vec![obs.iter().map(|o| o.iv).collect()];
        cols.push(obs.iter().map(|o| o.moneyness).collect());
        cols.push(obs.iter().map(|o| o.sqrt_maturity).collect());
        cols.push(obs.iter().map(|o| if o.treated { 1.0 } else { 0.0 }).collect());
        cols.push(obs.iter().map(|o| if o.treated { o.moneyness } else { 0.0 }).collect());
        cols.push(obs.iter().map(|o| if o.treated { o.sqrt_maturity } else { 0.0 }).collect());
        demean(&mut cols, &w, &factors);
        let y = DVector::from_vec(cols.remove(0));
        let k = cols.len();
        let x = DMatrix::from_fn(n, k, |i, j| cols[j][i]);
        let xtx = x.transpose() * &x;
        let beta = xtx
            .try_inverse()
            .ok_or_else(|| Error::Collinear("global-linear design is singular".into()))?
            * x.transpose()
            * y;
        let g = |m0: f64, t0: f64| beta[0] * m0 + beta[1] * t0;
        let dg = |m0: f64, t0: f64| beta[2] + beta[3] * m0 + beta[4] * t0;
        let control: Vec<Vec<f64>> = t_grid
            .iter()
            .map(|&t0| m_grid.iter().map(|&m0| g(m0, t0)).collect())
            .collect();
        let delta: Vec<Vec<f64>> = t_grid
            .iter()
            .map(|&t0| m_grid.iter().map(|&m0| dg(m0, t0)).collect())
            .collect();
        return Ok(FwlSurface {
            moneyness: m_grid.to_vec(),
            maturity: t_grid.to_vec(),
            flagged: vec![vec![false; m_grid.len()]; t_grid.len()],
            control,
            delta,
            linear_coefs: Some((names, beta.iter().copied().collect())),
        });
    }

    let mut cols = vec![obs.iter().map(|o| o.iv).collect::<Vec<f64>>()];
    demean(&mut cols, &w, &factors);
    let ivd = &cols[0];

    let sd_t = crate::math::sample_sd(&obs.iter().map(|o| o.sqrt_maturity).collect::<Vec<_>>()).max(1e-12);

    let local_fit = |treated: bool, m0: f64, t0: f64| -> (f64, bool) {
        // degree-2 local polynomial with product Gaussian weights
        let mut xtx = DMatrix::<f64>::zeros(6, 6);
        let mut xty = DVector::<f64>::zeros(6);
        let mut wsum = 0.0;
        let mut w2sum = 0.0;
        for (i, o) in obs.iter().enumerate() {
            if o.treated != treated {
                continue;
            }
            let u = (o.moneyness - m0) / bandwidth;
            let v = (o.sqrt_maturity - t0) / (bandwidth * sd_t / 0.1_f64.max(1e-12));
            let wi = crate::math::norm_pdf(u) * crate::math::norm_pdf(v);
            if wi < 1e-12 {
                continue;
            }
            let z = [1.0, u, v, u * u, u * v, v * v];
            for a in 0..6 {
                for b in 0..6 {
                    xtx[(a, b)] += wi * z[a] * z[b];
                }
                xty[a] += wi * z[a] * ivd[i];
            }
            wsum += wi;
            w2sum += wi * wi;
        }
        let eff = if w2sum > 0.0 { wsum * wsum / w2sum } else { 0.0 };
        match xtx.svd(true, true).solve(&xty, 1e-10) {
            Ok(beta) if eff >= 30.0 => (beta[0], false),
            Ok(beta) => (beta[0], true),
            Err(_) => (f64::NAN, true),
        }
    };

    let mut control = Vec::new();
    let mut delta = Vec::new();
    let mut flagged = Vec::new();
    for &t0 in t_grid {
        let mut crow = Vec::new();
        let mut drow = Vec::new();
        let mut frow = Vec::new();
        for &m0 in m_grid {
            let (c, fc) = local_fit(false, m0, t0);
            let (t, ft) = local_fit(true, m0, t0);
            crow.push(c);
            drow.push(t - c);
            frow.push(fc || ft);
        }
        control.push(crow);
        delta.push(drow);
        flagged.push(frow);
    }
    Ok(FwlSurface {
        moneyness: m_grid.to_vec(),
        maturity: t_grid.to_vec(),
        control,
        delta,
        flagged,
        linear_coefs: None,
    })
}

/// Dummy-variable OLS oracle used by tests: builds the full design with
/// explicit dummies, solves by SVD least squares, and returns the covariate
/// coefficients plus the rank of the full design.
pub fn dummy_ols_oracle(
    obs: &[PanelObs],
    absorb: &[Vec<u32>],
) -> Result<(Vec<f64>, usize, Vec<f64>, DMatrix<f64>)> {
    let n = obs.len();
    let k = obs[0].x.len();
    let mut dummy_groups = Vec::new();
    for f in absorb {
        let (ids, g) = group_ids(f);
        dummy_groups.push((ids, g));
    }
    let total_dummies: usize = dummy_groups.iter().map(|(_, g)| *g).sum();
    let p = k + total_dummies;
    let mut z = DMatrix::zeros(n, p);
    for i in 0..n {
        let sw = obs[i].weight.sqrt();
        for j in 0..k {
            z[(i, j)] = sw * obs[i].x[j];
        }
        let mut off = k;
        for (ids, g) in &dummy_groups {
            z[(i, off + ids[i])] = sw;
            off += g;
        }
    }
    let y = DVector::from_fn(n, |i, _| obs[i].weight.sqrt() * obs[i].y);
    let svd = z.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * max_sv * (n.max(p) as f64)).count();
    let beta = svd.solve(&y, 1e-10 * max_sv).map_err(|e| Error::Numeric(e.to_string()))?;
    let resid_w = &y - &z * &beta;
    // unweighted residuals
    let resid: Vec<f64> = (0..n)
        .map(|i| {
            let sw = obs[i].weight.sqrt();
            if sw > 0.0 {
                resid_w[i] / sw
            } else {
                0.0
            }
        })
        .collect();
    Ok((beta.as_slice()[..k].to_vec(), rank, resid, z))
}
