//! Euclidean projection onto a polyhedron `{x : A x >= b}`.
//!
//! Solved through the dual: `x* = c + Aᵀλ*` where `λ* >= 0` minimizes
//! `½ λᵀ A Aᵀ λ + λᵀ (A c − b)`. The dual is a bound-constrained QP handled
//! with a Lawson–Hanson style active set, which terminates with an exact
//! KKT point up to linear-solve precision.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub struct Projection {
    pub x: Vec<f64>,
    /// Dual multipliers, one per constraint row.
    pub lambda: Vec<f64>,
    /// max(0, b − A x) over rows.
    pub primal_residual: f64,
    /// Stationarity residual ‖x − c − Aᵀλ‖∞ (zero by construction) combined
    /// with complementary slackness |λᵢ (A x − b)ᵢ|.
    pub kkt_residual: f64,
}

/// Project `c` onto `{x : A x >= b}`. Rows of `A` are normalized internally.
pub fn project_polyhedron(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>) -> Result<Projection> {
    let m = a.nrows();
    let n = a.ncols();
    assert_eq!(b.len(), m);
    assert_eq!(c.len(), n);

    // Row normalization for conditioning.
    let mut an = a.clone();
    let mut bn = b.clone();
    for i in 0..m {
        let norm = an.row(i).norm();
        if norm > 0.0 {
            for j in 0..n {
                an[(i, j)] /= norm;
            }
            bn[i] /= norm;
        }
    }

    let q = &an * an.transpose();
    let d = &an * c - &bn; // gradient at λ=0 is d; dual objective ½λ'Qλ + λ'd

    let mut lambda = DVector::<f64>::zeros(m);
    let mut free: Vec<bool> = vec![false; m];
    let tol = 1e-12;
    let max_outer = 20 * m + 100;

    // Solve Q_PP λ_P = −d_P on the free set (SVD for rank deficiency).
    let solve_free = |free: &[bool], q: &DMatrix<f64>, d: &DVector<f64>| -> Option<DVector<f64>> {
        let idx: Vec<usize> = (0..m).filter(|&i| free[i]).collect();
        if idx.is_empty() {
            return Some(DVector::zeros(0));
        }
        let k = idx.len();
        let mut qs = DMatrix::zeros(k, k);
        let mut ds = DVector::zeros(k);
        for (r, &i) in idx.iter().enumerate() {
            ds[r] = -d[i];
            for (s, &j) in idx.iter().enumerate() {
                qs[(r, s)] = q[(i, j)];
            }
        }
        let svd = qs.svd(true, true);
        svd.solve(&ds, 1e-12).ok()
    };

    for _ in 0..max_outer {
        // gradient of dual: Qλ + d = A x − b
        let grad = &q * &lambda + &d;
        // most violated primal constraint among bound duals
        let mut best = None;
        let mut best_v = -tol;
        for i in 0..m {
            if !free[i] && grad[i] < best_v {
                best_v = grad[i];
                best = Some(i);
            }
        }
        let Some(enter) = best else {
            break; // KKT satisfied
        };
        free[enter] = true;

        // Inner loop: restore λ_P >= 0.
        loop {
            let Some(sol) = solve_free(&free, &q, &d) else {
                return Err(Error::Numeric("projection: singular dual subsystem".into()));
            };
            let idx: Vec<usize> = (0..m).filter(|&i| free[i]).collect();
            let mut trial = DVector::<f64>::zeros(m);
            for (r, &i) in idx.iter().enumerate() {
                trial[i] = sol[r];
            }
            if idx.iter().all(|&i| trial[i] >= -1e-13) {
                lambda = trial;
                break;
            }
            // step from lambda toward trial until first crossing of zero
            let mut alpha = 1.0_f64;
            for &i in &idx {
                if trial[i] < -1e-13 {
                    let a_i = lambda[i] / (lambda[i] - trial[i]);
                    if a_i < alpha {
                        alpha = a_i;
                    }
                }
            }
            for &i in &idx {
                lambda[i] += alpha * (trial[i] - lambda[i]);
                if lambda[i] <= 1e-13 {
                    lambda[i] = 0.0;
                    free[i] = false;
                }
            }
        }
    }

    let x = c + an.transpose() * &lambda;
    let ax = &an * &x;
    let mut primal = 0.0_f64;
    let mut comp = 0.0_f64;
    for i in 0..m {
        primal = primal.max(bn[i] - ax[i]);
        comp = comp.max((lambda[i] * (ax[i] - bn[i])).abs());
    }
    if primal > 1e-10 {
        return Err(Error::Numeric(format!(
            "projection: primal feasibility {primal:.2e} exceeds tolerance"
        )));
    }
    Ok(Projection {
        x: x.as_slice().to_vec(),
        lambda: lambda.as_slice().to_vec(),
        primal_residual: primal,
        kkt_residual: comp,
    })
}

/// Projection of `c` onto `{x : A_S x = b_S}` (used by the brute-force
/// active-set oracle in tests).
pub fn project_equality(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>) -> Option<Vec<f64>> {
    if a.nrows() == 0 {
        return Some(c.as_slice().to_vec());
    }
    let gram = a * a.transpose();
    let rhs = b - a * c;
    let svd = gram.svd(true, true);
    let mu = svd.solve(&rhs, 1e-10).ok()?;
    let x = c + a.transpose() * mu;
    // confirm constraints actually hold (rank-deficient inconsistent sets fail)
    let res = (a * &x - b).amax();
    if res > 1e-8 {
        return None;
    }
    Some(x.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_point_is_identity() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![0.0, 0.0]);
        let c = DVector::from_vec(vec![1.0, 2.0]);
        let p = project_polyhedron(&a, &b, &c).unwrap();
        assert!((p.x[0] - 1.0).abs() < 1e-12);
        assert!((p.x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn projects_onto_halfspace() {
        // x1 + x2 >= 2, c = (0,0) -> closest point (1,1)
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0]);
        let c = DVector::from_vec(vec![0.0, 0.0]);
        let p = project_polyhedron(&a, &b, &c).unwrap();
        assert!((p.x[0] - 1.0).abs() < 1e-10);
        assert!((p.x[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn projects_onto_box_corner() {
        // x >= 1 componentwise, c = (-3, 0.5)
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let c = DVector::from_vec(vec![-3.0, 0.5]);
        let p = project_polyhedron(&a, &b, &c).unwrap();
        assert!((p.x[0] - 1.0).abs() < 1e-10);
        assert!((p.x[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn matches_equality_projection_when_active() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 1.0]);
        let b = DVector::from_vec(vec![0.5]);
        let c = DVector::from_vec(vec![0.0, 0.3, 0.0]);
        let p = project_polyhedron(&a, &b, &c).unwrap();
        let e = project_equality(&a, &b, &c).unwrap();
        for i in 0..3 {
            assert!((p.x[i] - e[i]).abs() < 1e-10);
        }
    }
}
