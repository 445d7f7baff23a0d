//! Small numerical helpers shared across modules: stable log-sum-exp,
//! Gaussian log densities, trapezoid quadrature, bisection and the
//! Kolmogorov–Smirnov statistic.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `ln N(x | 0, 1)`.
pub fn std_normal_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - HALF_LN_2PI
}

/// `ln N(x | mean, sd^2)`.
pub fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - HALF_LN_2PI
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln((1/n) Σ exp(x_i))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// Evenly spaced grid with `n >= 2` points spanning `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs at least two points");
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

/// Composite trapezoid rule for samples `ys` on an evenly spaced grid.
pub fn trapezoid(ys: &[f64], dx: f64) -> f64 {
    if ys.len() < 2 {
        return 0.0;
    }
    let inner: f64 = ys[1..ys.len() - 1].iter().sum();
    dx * (inner + 0.5 * (ys[0] + ys[ys.len() - 1]))
}

/// Running trapezoid integral; `out[0] = 0` and `out[n-1]` equals [`trapezoid`].
pub fn cumulative_trapezoid(ys: &[f64], dx: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(ys.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in ys.windows(2) {
        acc += 0.5 * dx * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// Piecewise-linear CDF tabulated on a grid, normalised to end at 1.
#[derive(Debug, Clone)]
pub struct TabulatedCdf {
    grid: Vec<f64>,
    cdf: Vec<f64>,
}

impl TabulatedCdf {
    /// Builds the CDF from density values on an evenly spaced grid.
    pub fn from_density(grid: Vec<f64>, density: &[f64]) -> Self {
        assert_eq!(grid.len(), density.len());
        let dx = grid[1] - grid[0];
        let mut cdf = cumulative_trapezoid(density, dx);
        let total = *cdf.last().unwrap();
        for c in &mut cdf {
            *c /= total;
        }
        TabulatedCdf { grid, cdf }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x <= g[0] {
            return 0.0;
        }
        if x >= g[g.len() - 1] {
            return 1.0;
        }
        let dx = g[1] - g[0];
        let pos = (x - g[0]) / dx;
        let i = (pos.floor() as usize).min(g.len() - 2);
        let t = pos - i as f64;
        self.cdf[i] + t * (self.cdf[i + 1] - self.cdf[i])
    }

    /// Smallest grid-interpolated `x` with `CDF(x) >= p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let idx = self.cdf.partition_point(|&c| c < p);
        if idx == 0 {
            return self.grid[0];
        }
        if idx >= self.cdf.len() {
            return *self.grid.last().unwrap();
        }
        let (c0, c1) = (self.cdf[idx - 1], self.cdf[idx]);
        let (x0, x1) = (self.grid[idx - 1], self.grid[idx]);
        if c1 == c0 {
            x1
        } else {
            x0 + (p - c0) / (c1 - c0) * (x1 - x0)
        }
    }
}

/// One-sample KS statistic `sup |F_n(x) - F(x)|`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Bisection on a monotonically increasing `f` over `[lo, hi]` until the
/// residual `|f(x) - target| < tol` or the bracket collapses.
pub fn bisect_increasing<F: Fn(f64) -> f64>(
    f: F,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> Result<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if !(flo <= target && target <= fhi) {
        return Err(Error::Solver(format!(
            "bracket [{}, {}] maps to [{}, {}] which does not contain {}",
            lo, hi, flo, fhi, target
        )));
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if !fm.is_finite() {
            return Err(Error::Solver(format!("non-finite value {} at {}", fm, mid)));
        }
        if (fm - target).abs() < tol || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if fm < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Mean and standard error of the mean (sample std / sqrt(n)).
pub fn mean_and_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
