// SPDX-License-Identifier: Apache-2.0

//! Divergence stage: Gaussian summaries of energy scores, the JSD
//! discrimination loss, the reciprocal total loss, and the CE / NCE ablation
//! losses built on a scalar logistic head.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AresError, Result};
use crate::numerics::{jsd_gauss1d, jsd_gauss1d_grad, Gauss1d, VARIANCE_FLOOR};

/// Added to `L_dis` before taking its reciprocal.
pub const DIV_GUARD: f64 = 1e-8;
pub const HISTOGRAM_BINS: usize = 50;

/// Population mean and variance of a batch of energy scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyDist {
    pub dist: Gauss1d,
    pub count: usize,
    /// True when the raw variance was below the floor.
    pub floored: bool,
}

pub fn fit_energy_distribution(scores: &[f64]) -> Result<EnergyDist> {
    if scores.is_empty() {
        return Err(AresError::invalid_input("energy distribution of an empty score list"));
    }
    let n = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n;
    Ok(EnergyDist {
        dist: Gauss1d::new(mu, var),
        count: scores.len(),
        floored: !(var > VARIANCE_FLOOR),
    })
}

pub fn jsd_discrimination_loss(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    let p = fit_energy_distribution(id_scores)?;
    let q = fit_energy_distribution(ood_scores)?;
    Ok(jsd_gauss1d(p.dist, q.dist))
}

fn moment_grads(scores: &[f64], d: &EnergyDist, dmu: f64, dvar: f64) -> Vec<f64> {
    let n = scores.len() as f64;
    let dvar = if d.floored { 0.0 } else { dvar };
    scores
        .iter()
        .map(|s| dmu / n + dvar * 2.0 * (s - d.dist.mu) / n)
        .collect()
}

/// The loss and its gradient with respect to every input score.
pub fn jsd_discrimination_loss_grad(
    id_scores: &[f64],
    ood_scores: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let p = fit_energy_distribution(id_scores)?;
    let q = fit_energy_distribution(ood_scores)?;
    let loss = jsd_gauss1d(p.dist, q.dist);
    let [dmp, dvp, dmq, dvq] = jsd_gauss1d_grad(p.dist, q.dist);
    Ok((
        loss,
        moment_grads(id_scores, &p, dmp, dvp),
        moment_grads(ood_scores, &q, dmq, dvq),
    ))
}

/// `cls + beta / (dis + DIV_GUARD)`.
pub fn total_loss(cls: f64, dis: f64, beta: f64) -> f64 {
    cls + beta / (dis + DIV_GUARD)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub dis: f64,
    pub total: f64,
    pub beta: f64,
}

/// `p(inlier | E) = sigmoid(weight·E + bias)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    pub weight: f64,
    pub bias: f64,
}

impl Default for LogisticHead {
    fn default() -> Self {
        Self {
            weight: 1.0,
            bias: 0.0,
        }
    }
}

impl LogisticHead {
    pub fn logit(&self, e: f64) -> f64 {
        self.weight * e + self.bias
    }

    pub fn prob(&self, e: f64) -> f64 {
        sigmoid(self.logit(e))
    }
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(u))` without overflow.
fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn nonempty(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(AresError::invalid_input("discrimination loss needs nonempty ID and OOD score lists"));
    }
    Ok(())
}

/// Binary cross-entropy on `sigmoid(head(E))`, ID labeled 1 and virtual OOD labeled 0,
/// averaged over both sets.
pub fn ce_logistic_loss(id_scores: &[f64], ood_scores: &[f64], head: &LogisticHead) -> Result<f64> {
    ce_logistic_loss_grad(id_scores, ood_scores, head).map(|r| r.0)
}

/// Loss, `∂/∂E_id`, `∂/∂E_ood`, and `∂/∂(weight, bias)`.
pub fn ce_logistic_loss_grad(
    id_scores: &[f64],
    ood_scores: &[f64],
    head: &LogisticHead,
) -> Result<(f64, Vec<f64>, Vec<f64>, [f64; 2])> {
    nonempty(id_scores, ood_scores)?;
    let n = (id_scores.len() + ood_scores.len()) as f64;
    let mut loss = 0.0;
    let mut dhead = [0.0; 2];
    let mut side = |scores: &[f64], label: f64| -> Vec<f64> {
        scores
            .iter()
            .map(|&e| {
                let u = head.logit(e);
                loss += if label > 0.5 { softplus(-u) } else { softplus(u) };
                let du = (sigmoid(u) - label) / n;
                dhead[0] += du * e;
                dhead[1] += du;
                du * head.weight
            })
            .collect()
    };
    let gid = side(id_scores, 1.0);
    let good = side(ood_scores, 0.0);
    Ok((loss / n, gid, good, dhead))
}

/// Contrastive loss on head outputs `s = sigmoid(head(E))`: every ID score is its
/// own positive (similarity 0) against all OOD scores with similarity
/// `−|s_i − s_j| / temperature`; mean over ID of `log(1 + Σ_j exp(sim_ij))`.
pub fn nce_loss(id_scores: &[f64], ood_scores: &[f64], head: &LogisticHead, temperature: f64) -> Result<f64> {
    nce_loss_grad(id_scores, ood_scores, head, temperature).map(|r| r.0)
}

pub fn nce_loss_grad(
    id_scores: &[f64],
    ood_scores: &[f64],
    head: &LogisticHead,
    temperature: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, [f64; 2])> {
    nonempty(id_scores, ood_scores)?;
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(AresError::invalid_param(format!(
            "NCE temperature must be > 0, got {temperature}"
        )));
    }
    let n_id = id_scores.len() as f64;
    let s_id: Vec<f64> = id_scores.iter().map(|&e| head.prob(e)).collect();
    let s_ood: Vec<f64> = ood_scores.iter().map(|&e| head.prob(e)).collect();
    let mut loss = 0.0;
    let mut ds_id = vec![0.0; s_id.len()];
    let mut ds_ood = vec![0.0; s_ood.len()];
    for (i, &a) in s_id.iter().enumerate() {
        let sims: Vec<f64> = s_ood.iter().map(|&b| -(a - b).abs() / temperature).collect();
        let denom = 1.0 + sims.iter().map(|s| s.exp()).sum::<f64>();
        loss += denom.ln();
        for (j, &sim) in sims.iter().enumerate() {
            let w = sim.exp() / denom / n_id;
            let sign = (a - s_ood[j]).signum() * f64::from(a != s_ood[j]);
            ds_id[i] -= w * sign / temperature;
            ds_ood[j] += w * sign / temperature;
        }
    }
    let mut dhead = [0.0; 2];
    let mut chain = |scores: &[f64], s: &[f64], ds: Vec<f64>| -> Vec<f64> {
        scores
            .iter()
            .zip(s)
            .zip(ds)
            .map(|((&e, &p), g)| {
                let du = g * p * (1.0 - p);
                dhead[0] += du * e;
                dhead[1] += du;
                du * head.weight
            })
            .collect()
    };
    let gid = chain(id_scores, &s_id, ds_id);
    let good = chain(ood_scores, &s_ood, ds_ood);
    Ok((loss / n_id, gid, good, dhead))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count_id: usize,
    pub count_ood: usize,
    pub count_virtual: usize,
}

/// [`HISTOGRAM_BINS`] uniform bins over the joint range of all three score sets.
/// The last bin is closed on the right.
pub fn energy_histogram(id: &[f64], ood: &[f64], virt: &[f64]) -> Result<Vec<HistogramBin>> {
    let all = id.iter().chain(ood).chain(virt);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(AresError::invalid_input("histogram needs at least one finite score"));
    }
    let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
    let mut bins: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
        .map(|b| HistogramBin {
            left: lo + b as f64 * width,
            right: if b + 1 == HISTOGRAM_BINS && hi > lo { hi } else { lo + (b + 1) as f64 * width },
            count_id: 0,
            count_ood: 0,
            count_virtual: 0,
        })
        .collect();
    let bin_of = |s: f64| (((s - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
    id.iter().for_each(|&s| bins[bin_of(s)].count_id += 1);
    ood.iter().for_each(|&s| bins[bin_of(s)].count_ood += 1);
    virt.iter().for_each(|&s| bins[bin_of(s)].count_virtual += 1);
    Ok(bins)
}

pub fn write_histogram_csv(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    let mut out = String::from("bin_left,bin_right,count_id,count_ood,count_virtual\n");
    for b in bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            b.left, b.right, b.count_id, b.count_ood, b.count_virtual
        );
    }
    std::fs::write(path, out).map_err(|e| AresError::io(path, e))
}
