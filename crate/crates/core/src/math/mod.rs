pub mod optim;
pub mod qp;
pub mod quad;

use statrs::distribution::{ContinuousCDF, Normal};

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn norm_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

pub fn norm_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Trapezoid integral of `values` over an equally or unequally spaced grid.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    assert_eq!(grid.len(), values.len());
    let mut acc = 0.0;
    for i in 1..grid.len() {
        acc += 0.5 * (values[i] + values[i - 1]) * (grid[i] - grid[i - 1]);
    }
    acc
}

/// Sample standard deviation.
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ss = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    (ss / (n - 1) as f64).sqrt()
}

/// Gaussian kernel density of `samples` evaluated on `grid`, Silverman
/// bandwidth unless one is supplied.
pub fn gaussian_kde(samples: &[f64], grid: &[f64], bandwidth: Option<f64>) -> Vec<f64> {
    let n = samples.len();
    let h = bandwidth.unwrap_or_else(|| {
        let sd = sample_sd(samples);
        (1.06 * sd * (n as f64).powf(-0.2)).max(1e-12)
    });
    let inv_nh = 1.0 / (n as f64 * h);
    grid.iter()
        .map(|&g| {
            samples
                .iter()
                .map(|&s| norm_pdf((g - s) / h))
                .sum::<f64>()
                * inv_nh
        })
        .collect()
}
