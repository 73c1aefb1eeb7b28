// SPDX-License-Identifier: Apache-2.0

//! Outlier synthesis for out-of-distribution detection on synthetic vector data.
//!
//! The pipeline moves ID instances out of the ID region by mixing them with
//! fractal auxiliary points (`escape`), mixes their features (`synthesis`),
//! fits one Gaussian over the mixed features and keeps the lowest-likelihood
//! members as virtual outliers, then trains an MLP whose energy score
//! separates inliers from those outliers (`divergence`, `training`).
//! `evaluation` thresholds the energy score and reports FPR95 and AUROC.

pub mod divergence;
pub mod error;
pub mod escape;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod synthesis;
pub mod training;

pub use error::{AresError, Result};
