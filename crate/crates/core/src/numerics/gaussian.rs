// SPDX-License-Identifier: Apache-2.0

//! Multivariate Gaussian estimation and log-density.
//!
//! Means and covariances use population (1/N) normalization. The covariance is
//! factored after adding a ridge proportional to its mean diagonal; the ridge
//! escalates ×10 until the Cholesky factorization succeeds.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{AresError, Result};

pub const DEFAULT_RIDGE_SCALE: f64 = 1e-6;
const MAX_RIDGE_ESCALATIONS: usize = 8;

/// Dense row-major symmetric matrix paired with its lower Cholesky factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianModel {
    pub mu: Vec<f64>,
    /// `p × p`, row-major.
    pub sigma: Vec<f64>,
    /// Lower-triangular factor of `sigma + ridge·I`, row-major.
    pub chol: Vec<f64>,
    pub ridge: f64,
    /// `log det(sigma + ridge·I)`.
    log_det: f64,
}

/// Cholesky factorization of a row-major SPD matrix. `None` on a non-positive pivot.
pub fn cholesky(a: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Some(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn forward_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; p];
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * p + k] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    y
}

impl GaussianModel {
    /// Builds a model from a given mean and covariance, factoring `sigma + ridge·I`.
    ///
    /// The first attempt uses `ridge = ridge_scale · trace(sigma)/p`; each failure
    /// multiplies the ridge by 10. A zero initial ridge that fails restarts at
    /// `max(ridge_scale, 1e-12) · max(trace/p, 1)`.
    pub fn from_moments(mu: Vec<f64>, sigma: Vec<f64>, ridge_scale: f64) -> Result<Self> {
        let p = mu.len();
        if p == 0 || sigma.len() != p * p {
            return Err(AresError::invalid_input(format!(
                "covariance of length {} does not match dimension {p}",
                sigma.len()
            )));
        }
        if !ridge_scale.is_finite() || ridge_scale < 0.0 {
            return Err(AresError::invalid_param(format!(
                "ridge_scale must be finite and >= 0, got {ridge_scale}"
            )));
        }
        let mean_diag = (0..p).map(|i| sigma[i * p + i]).sum::<f64>() / p as f64;
        let mut ridge = ridge_scale * mean_diag;
        let mut regularized = sigma.clone();
        for attempt in 0..=MAX_RIDGE_ESCALATIONS {
            for i in 0..p {
                regularized[i * p + i] = sigma[i * p + i] + ridge;
            }
            if let Some(chol) = cholesky(&regularized, p) {
                let log_det = 2.0 * (0..p).map(|i| chol[i * p + i].ln()).sum::<f64>();
                return Ok(Self {
                    mu,
                    sigma,
                    chol,
                    ridge,
                    log_det,
                });
            }
            if attempt == MAX_RIDGE_ESCALATIONS {
                break;
            }
            ridge = if ridge > 0.0 {
                ridge * 10.0
            } else {
                ridge_scale.max(1e-12) * mean_diag.max(1.0)
            };
        }
        Err(AresError::Numerical(format!(
            "covariance factorization failed after {MAX_RIDGE_ESCALATIONS} ridge escalations (last ridge {ridge:e})"
        )))
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Log of the multivariate normal density at `v`, using the stored factor.
    pub fn logpdf(&self, v: &[f64]) -> Result<f64> {
        let p = self.dim();
        if v.len() != p {
            return Err(AresError::invalid_input(format!(
                "point has dimension {}, model has {p}",
                v.len()
            )));
        }
        let diff: Vec<f64> = v.iter().zip(&self.mu).map(|(a, m)| a - m).collect();
        let z = forward_solve(&self.chol, p, &diff);
        let maha: f64 = z.iter().map(|x| x * x).sum();
        Ok(-0.5 * (p as f64 * (2.0 * PI).ln() + self.log_det + maha))
    }
}

/// Lexicographic order on coordinates; fixes the summation order so the fit
/// does not depend on how the caller ordered the points.
fn canonical_order(points: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Fits mean and population covariance over `points`.
///
/// Summation runs left to right over the points sorted lexicographically by
/// coordinates, which makes the result bitwise invariant to input order.
pub fn fit_gaussian(points: &[Vec<f64>], ridge_scale: f64) -> Result<GaussianModel> {
    if points.len() < 2 {
        return Err(AresError::invalid_input(format!(
            "need at least 2 points to fit a Gaussian, got {}",
            points.len()
        )));
    }
    let p = points[0].len();
    if p == 0 {
        return Err(AresError::invalid_input("points have dimension 0"));
    }
    for (i, x) in points.iter().enumerate() {
        if x.len() != p {
            return Err(AresError::invalid_input(format!(
                "point {i} has dimension {}, expected {p}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(AresError::invalid_input(format!("point {i} is not finite")));
        }
    }
    let order = canonical_order(points);
    let n = points.len() as f64;

    let mut mu = vec![0.0; p];
    for &i in &order {
        for (m, x) in mu.iter_mut().zip(&points[i]) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);

    let mut sigma = vec![0.0; p * p];
    let mut diff = vec![0.0; p];
    for &i in &order {
        for (d, (x, m)) in diff.iter_mut().zip(points[i].iter().zip(&mu)) {
            *d = x - m;
        }
        for r in 0..p {
            for c in 0..=r {
                sigma[r * p + c] += diff[r] * diff[c];
            }
        }
    }
    for r in 0..p {
        for c in 0..=r {
            let v = sigma[r * p + c] / n;
            sigma[r * p + c] = v;
            sigma[c * p + r] = v;
        }
    }
    GaussianModel::from_moments(mu, sigma, ridge_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn four_point_square() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![2.0, 2.0],
        ];
        let g = fit_gaussian(&pts, DEFAULT_RIDGE_SCALE).unwrap();
        assert_eq!(g.mu, vec![1.0, 1.0]);
        assert_eq!(g.sigma, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(g.ridge, 1e-6);
    }

    #[test]
    fn identical_points_get_ridge_only() {
        let pts = vec![vec![3.0, -1.0, 0.5]; 10];
        let g = fit_gaussian(&pts, DEFAULT_RIDGE_SCALE).unwrap();
        assert_eq!(g.mu, vec![3.0, -1.0, 0.5]);
        assert!(g.sigma.iter().all(|&s| s == 0.0));
        assert!(g.ridge > 0.0);
        let r = g.ridge.sqrt();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { r } else { 0.0 };
                assert!((g.chol[i * 3 + j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_gaussian(&[vec![1.0]], 1e-6).is_err());
        assert!(fit_gaussian(&[vec![1.0, 2.0], vec![1.0]], 1e-6).is_err());
        assert!(fit_gaussian(&[vec![1.0, f64::NAN], vec![1.0, 2.0]], 1e-6).is_err());
    }

    #[test]
    fn logpdf_standard_cases() {
        let g = GaussianModel::from_moments(vec![0.5, -0.5], vec![1.0, 0.0, 0.0, 1.0], 0.0).unwrap();
        let base = (1.0 / (2.0 * PI)).ln();
        assert!((g.logpdf(&[0.5, -0.5]).unwrap() - base).abs() < 1e-14);
        assert!((g.logpdf(&[1.5, -0.5]).unwrap() - (base - 0.5)).abs() < 1e-14);
        assert!(g.logpdf(&[1.0]).is_err());
    }

    #[test]
    fn recovers_known_mean() {
        let mut rng = Rng::new(11);
        let mu0 = [1.0, -2.0, 0.5];
        // Σ0 = A Aᵀ with A lower-triangular.
        let a = [[1.0, 0.0, 0.0], [0.3, 0.8, 0.0], [-0.2, 0.1, 0.5]];
        let pts: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let z: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                (0..3)
                    .map(|i| mu0[i] + (0..3).map(|k| a[i][k] * z[k]).sum::<f64>())
                    .collect()
            })
            .collect();
        let g = fit_gaussian(&pts, DEFAULT_RIDGE_SCALE).unwrap();
        for i in 0..3 {
            assert!((g.mu[i] - mu0[i]).abs() < 0.05);
        }
    }

    #[test]
    fn factor_reproduces_regularized_sigma() {
        let mut rng = Rng::new(5);
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| rng.normal()).collect())
            .collect();
        let g = fit_gaussian(&pts, DEFAULT_RIDGE_SCALE).unwrap();
        let p = 6;
        for i in 0..p {
            for j in 0..p {
                assert!((g.sigma[i * p + j] - g.sigma[j * p + i]).abs() <= 1e-12);
                let llt: f64 = (0..p).map(|k| g.chol[i * p + k] * g.chol[j * p + k]).sum();
                let want = g.sigma[i * p + j] + if i == j { g.ridge } else { 0.0 };
                assert!((llt - want).abs() < 1e-8);
            }
        }
    }
}
