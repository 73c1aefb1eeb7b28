// SPDX-License-Identifier: Apache-2.0

//! One-dimensional Gaussians and their closed-form divergences.

use serde::{Deserialize, Serialize};

pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gauss1d {
    pub mu: f64,
    pub var: f64,
}

impl Gauss1d {
    /// Variance is clamped to [`VARIANCE_FLOOR`].
    pub fn new(mu: f64, var: f64) -> Self {
        Self {
            mu,
            var: var.max(VARIANCE_FLOOR),
        }
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.logpdf(x).exp()
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        let d = x - self.mu;
        -0.5 * ((2.0 * std::f64::consts::PI * self.var).ln() + d * d / self.var)
    }
}

/// `KL(p ‖ q)` in closed form.
pub fn kld_gauss1d(p: Gauss1d, q: Gauss1d) -> f64 {
    let d = p.mu - q.mu;
    0.5 * (q.var / p.var).ln() + (p.var + d * d) / (2.0 * q.var) - 0.5
}

/// The Gaussian with the first two moments of the equal-weight mixture `(p + q)/2`.
pub fn moment_match_mixture(p: Gauss1d, q: Gauss1d) -> Gauss1d {
    let d = p.mu - q.mu;
    Gauss1d::new(0.5 * (p.mu + q.mu), 0.5 * (p.var + q.var) + 0.25 * d * d)
}

/// Jensen–Shannon divergence against the moment-matched midpoint.
pub fn jsd_gauss1d(p: Gauss1d, q: Gauss1d) -> f64 {
    let m = moment_match_mixture(p, q);
    0.5 * kld_gauss1d(p, m) + 0.5 * kld_gauss1d(q, m)
}

/// Partial derivatives of [`jsd_gauss1d`] with respect to `(p.mu, p.var, q.mu, q.var)`.
///
/// With the moment-matched midpoint the quadratic terms cancel and
/// `JSD = ½·ln σ_M² − ¼·ln σ_p² − ¼·ln σ_q²`, which these derivatives follow.
pub fn jsd_gauss1d_grad(p: Gauss1d, q: Gauss1d) -> [f64; 4] {
    let m = moment_match_mixture(p, q);
    let d = p.mu - q.mu;
    let dmu = d / (4.0 * m.var);
    [
        dmu,
        0.25 / m.var - 0.25 / p.var,
        -dmu,
        0.25 / m.var - 0.25 / q.var,
    ]
}
