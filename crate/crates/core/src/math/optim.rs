//! Local optimizers shared by the likelihood fits and the calibration loop:
//! a Nelder–Mead simplex and a BFGS quasi-Newton with finite-difference
//! gradients.

use nalgebra::{DMatrix, DVector};

/// Central-difference gradient.
pub fn num_grad<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let step = h * (1.0 + x[i].abs());
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Central-difference Hessian (used for sandwich standard errors).
pub fn num_hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let f0 = f(x);
    let steps: Vec<f64> = x.iter().map(|&xi| h * (1.0 + xi.abs())).collect();
    for i in 0..n {
        // diagonal
        xp[i] = x[i] + steps[i];
        let fp = f(&xp);
        xp[i] = x[i] - steps[i];
        let fm = f(&xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (steps[i] * steps[i]);
        for j in (i + 1)..n {
            xp[i] = x[i] + steps[i];
            xp[j] = x[j] + steps[j];
            let fpp = f(&xp);
            xp[j] = x[j] - steps[j];
            let fpm = f(&xp);
            xp[i] = x[i] - steps[i];
            let fmm = f(&xp);
            xp[j] = x[j] + steps[j];
            let fmp = f(&xp);
            xp[i] = x[i];
            xp[j] = x[j];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * steps[i] * steps[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

pub struct OptimResult {
    pub x: Vec<f64>,
    pub fval: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// BFGS with backtracking Armijo line search and numeric gradients.
/// Minimizes `f`; convergence on gradient infinity norm.
pub fn bfgs<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    grad_tol: f64,
    max_iter: usize,
) -> OptimResult {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice());
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut g = DVector::from_vec(num_grad(f, x.as_slice(), 1e-6));
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter + 1;
        let gnorm = g.amax();
        if gnorm <= grad_tol {
            return OptimResult {
                x: x.as_slice().to_vec(),
                fval: fx,
                converged: true,
                iterations,
                grad_norm: gnorm,
            };
        }
        let mut dir = -(&hinv * &g);
        if dir.dot(&g) >= 0.0 {
            // not a descent direction, reset
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        // backtracking line search
        let mut step = 1.0;
        let slope = g.dot(&dir);
        let mut x_new = &x + step * &dir;
        let mut f_new = f(x_new.as_slice());
        let mut ls = 0;
        while !(f_new.is_finite() && f_new <= fx + 1e-4 * step * slope) && ls < 60 {
            step *= 0.5;
            x_new = &x + step * &dir;
            f_new = f(x_new.as_slice());
            ls += 1;
        }
        if ls >= 60 {
            // line search failed: stop at best so far
            break;
        }
        let g_new = DVector::from_vec(num_grad(f, x_new.as_slice(), 1e-6));
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i_mat = DMatrix::<f64>::identity(n, n);
            let left = &i_mat - rho * &s * y.transpose();
            let right = &i_mat - rho * &y * s.transpose();
            hinv = &left * hinv * &right + rho * &s * s.transpose();
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    let gnorm = g.amax();
    OptimResult {
        x: x.as_slice().to_vec(),
        fval: fx,
        converged: gnorm <= grad_tol,
        iterations,
        grad_norm: gnorm,
    }
}

/// Nelder–Mead simplex, minimizing `f`. Converges on simplex diameter or
/// function-value spread.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    initial_scale: f64,
    diam_tol: f64,
    max_iter: usize,
) -> OptimResult {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        let step = initial_scale * (1.0 + x0[i].abs());
        v[i] += step;
        simplex.push(v);
    }
    let mut fvals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter + 1;
        // sort simplex by fval
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fvals[a].partial_cmp(&fvals[b]).unwrap_or(std::cmp::Ordering::Equal));
        let sorted: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let sorted_f: Vec<f64> = idx.iter().map(|&i| fvals[i]).collect();
        simplex = sorted;
        fvals = sorted_f;

        // diameter
        let diam = (1..=n)
            .map(|i| {
                simplex[i]
                    .iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0_f64, f64::max)
            })
            .fold(0.0_f64, f64::max);
        if diam <= diam_tol {
            return OptimResult {
                x: simplex[0].clone(),
                fval: fvals[0],
                converged: true,
                iterations,
                grad_norm: f64::NAN,
            };
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let blend = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|j| centroid[j] + t * (centroid[j] - simplex[n][j]))
                .collect()
        };
        let xr = blend(1.0);
        let fr = f(&xr);
        if fr < fvals[0] {
            let xe = blend(2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                fvals[n] = fe;
            } else {
                simplex[n] = xr;
                fvals[n] = fr;
            }
        } else if fr < fvals[n - 1] {
            simplex[n] = xr;
            fvals[n] = fr;
        } else {
            let xc = if fr < fvals[n] { blend(0.5) } else { blend(-0.5) };
            let fc = f(&xc);
            if fc < fvals[n].min(fr) {
                simplex[n] = xc;
                fvals[n] = fc;
            } else {
                // shrink toward best
                for i in 1..=n {
                    for j in 0..n {
                        simplex[i][j] = simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]);
                    }
                    fvals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = fvals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);
    OptimResult {
        x: simplex[best].clone(),
        fval: fvals[best],
        converged: false,
        iterations,
        grad_norm: f64::NAN,
    }
}
