// SPDX-License-Identifier: Apache-2.0

//! Expansion and Estimation stages: feature-space mixup of surrogate features,
//! a class-agnostic Gaussian over the mixed points, and selection of the
//! lowest-likelihood members as virtual outliers.
//!
//! Thresholds are carried as log-densities. The log is monotone, so every
//! order statistic and "below ε" test is the same as on densities.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AresError, Result};
use crate::numerics::{fit_gaussian, GaussianModel, Rng, DEFAULT_RIDGE_SCALE};
use crate::synthdata::{write_points_csv, PointFile, PointRole};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpandedSet {
    pub points: Vec<Vec<f64>>,
    /// `(i, j, λ)` with `points[n] = λ·f_i + (1−λ)·f_j`.
    pub source_pairs: Vec<(usize, usize, f64)>,
}

impl ExpandedSet {
    /// Wraps features without mixing; every point is its own source with `λ = 1`.
    pub fn identity(feats: &[Vec<f64>]) -> Self {
        Self {
            points: feats.to_vec(),
            source_pairs: (0..feats.len()).map(|i| (i, i, 1.0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mixup with an injectable mixing-weight source.
pub fn expand_features_with(
    feats: &[Vec<f64>],
    n_mix: usize,
    rng: &mut Rng,
    mut draw_lambda: impl FnMut(&mut Rng) -> Result<f64>,
) -> Result<ExpandedSet> {
    let n = feats.len();
    if n < 2 {
        return Err(AresError::invalid_input(format!(
            "expansion needs at least 2 feature vectors, got {n}"
        )));
    }
    let mut out = ExpandedSet {
        points: Vec::with_capacity(n_mix),
        source_pairs: Vec::with_capacity(n_mix),
    };
    for _ in 0..n_mix {
        let i = rng.below(n);
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        let lam = draw_lambda(rng)?;
        out.points.push(
            feats[i]
                .iter()
                .zip(&feats[j])
                .map(|(a, b)| lam * a + (1.0 - lam) * b)
                .collect(),
        );
        out.source_pairs.push((i, j, lam));
    }
    Ok(out)
}

/// `n_mix` points `λ·f_i + (1−λ)·f_j` with `i ≠ j` uniform and `λ ~ Beta(alpha2, alpha2)`.
pub fn expand_features(feats: &[Vec<f64>], alpha2: f64, n_mix: usize, rng: &mut Rng) -> Result<ExpandedSet> {
    expand_features_with(feats, n_mix, rng, |r| r.beta(alpha2))
}

/// One Gaussian over all expanded points, ignoring labels.
pub fn estimate_outlier_region(xs: &ExpandedSet) -> Result<GaussianModel> {
    fit_gaussian(&xs.points, DEFAULT_RIDGE_SCALE)
}

pub fn log_densities(points: &[Vec<f64>], model: &GaussianModel) -> Result<Vec<f64>> {
    points.iter().map(|p| model.logpdf(p)).collect()
}

fn by_value_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))
}

/// Draws `m` indices without replacement (clamped to the pool) and returns the
/// `t`-th smallest score among them, ties broken by index.
pub fn select_epsilon_by(scores: &[f64], m: usize, t: usize, rng: &mut Rng) -> Result<f64> {
    let m_eff = m.min(scores.len());
    if t == 0 || t > m_eff {
        return Err(AresError::invalid_param(format!(
            "rank t={t} must lie in 1..={m_eff} (m={m}, pool {})",
            scores.len()
        )));
    }
    let mut picked = rng.sample_indices(scores.len(), m_eff);
    picked.sort_by(by_value_then_index(scores));
    Ok(scores[picked[t - 1]])
}

/// The `t`-th smallest log-density among `m` randomly chosen members of `xs`.
pub fn select_epsilon(xs: &ExpandedSet, model: &GaussianModel, m: usize, t: usize, rng: &mut Rng) -> Result<f64> {
    select_epsilon_by(&log_densities(&xs.points, model)?, m, t, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierBatch {
    pub points: Vec<Vec<f64>>,
    /// Log-density threshold; members lie strictly below it unless tied with it.
    pub epsilon: f64,
    pub loglik: Vec<f64>,
    /// Positions of the members in the candidate pool.
    pub indices: Vec<usize>,
}

fn bottom_indices(loglik: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..loglik.len()).collect();
    order.sort_by(by_value_then_index(loglik));
    order
}

fn gather(xs: &ExpandedSet, loglik: &[f64], idx: Vec<usize>, epsilon: f64) -> OutlierBatch {
    OutlierBatch {
        points: idx.iter().map(|&i| xs.points[i].clone()).collect(),
        loglik: idx.iter().map(|&i| loglik[i]).collect(),
        indices: idx,
        epsilon,
    }
}

/// The `count` lowest-density members of `xs` whose log-density is below `epsilon`.
pub fn sample_virtual_outliers(
    xs: &ExpandedSet,
    model: &GaussianModel,
    epsilon: f64,
    count: usize,
) -> Result<OutlierBatch> {
    let loglik = log_densities(&xs.points, model)?;
    let order = bottom_indices(&loglik);
    let available = order.iter().take_while(|&&i| loglik[i] < epsilon).count();
    if available < count {
        return Err(AresError::SynthesisUnderflow {
            needed: count,
            available,
        });
    }
    Ok(gather(xs, &loglik, order[..count].to_vec(), epsilon))
}

/// The `count` lowest-density members of `xs` under the stable (value, index)
/// order, with `ε` placed at the next order statistic. With distinct densities
/// the batch is exactly the members strictly below `ε`; with ties at the
/// boundary the index order decides. With no member left over, `ε` is `+∞`.
pub fn bottom_virtual_outliers(xs: &ExpandedSet, model: &GaussianModel, count: usize) -> Result<OutlierBatch> {
    if count == 0 || count > xs.len() {
        return Err(AresError::SynthesisUnderflow {
            needed: count.max(1),
            available: xs.len(),
        });
    }
    let loglik = log_densities(&xs.points, model)?;
    let order = bottom_indices(&loglik);
    let epsilon = order.get(count).map_or(f64::INFINITY, |&i| loglik[i]);
    Ok(gather(xs, &loglik, order[..count].to_vec(), epsilon))
}

/// Uniform choice of `count` members, ignoring density.
pub fn random_virtual_outliers(
    xs: &ExpandedSet,
    model: &GaussianModel,
    count: usize,
    rng: &mut Rng,
) -> Result<OutlierBatch> {
    if count > xs.len() {
        return Err(AresError::SynthesisUnderflow {
            needed: count,
            available: xs.len(),
        });
    }
    let loglik = log_densities(&xs.points, model)?;
    let idx = rng.sample_indices(xs.len(), count);
    Ok(gather(xs, &loglik, idx, f64::INFINITY))
}

/// `n` draws from `N(mu, sigma + ridge·I)`, wrapped as an expanded set without sources.
pub fn gaussian_candidates(model: &GaussianModel, n: usize, rng: &mut Rng) -> ExpandedSet {
    let p = model.dim();
    let points = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
            (0..p)
                .map(|i| model.mu[i] + (0..=i).map(|j| model.chol[i * p + j] * z[j]).sum::<f64>())
                .collect()
        })
        .collect();
    ExpandedSet {
        points,
        source_pairs: Vec::new(),
    }
}

/// Writes points in the shared CSV format with label column `-1`.
pub fn dump_points(path: &Path, points: &[Vec<f64>], role: PointRole) -> Result<()> {
    let dim = points.first().map_or(0, Vec::len);
    let file = PointFile {
        dim,
        classes: 0,
        role,
        rows: points.iter().map(|p| (-1, p.clone())).collect(),
    };
    write_points_csv(path, &file)
}
