// SPDX-License-Identifier: Apache-2.0

//! Random sampling, Gaussian estimation, and closed-form divergences.

mod gauss1d;
mod gaussian;
mod rng;

pub use gauss1d::{
    jsd_gauss1d, jsd_gauss1d_grad, kld_gauss1d, moment_match_mixture, Gauss1d, VARIANCE_FLOOR,
};
pub use gaussian::{
    cholesky, fit_gaussian, forward_solve, GaussianModel, DEFAULT_RIDGE_SCALE,
};
pub use rng::{beta_sample, Rng};
