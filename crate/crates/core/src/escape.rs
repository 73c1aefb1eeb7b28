// SPDX-License-Identifier: Apache-2.0

//! Escape stage: pushes every ID instance out of the ID region by repeated
//! mixing with auxiliary points and bijective geometric transforms, keeping
//! its label. The result is the surrogate ID set.

use serde::{Deserialize, Serialize};

use crate::error::{AresError, Result};
use crate::numerics::Rng;
use crate::synthdata::{apply_transform, AuxVector, LabeledVector, Transform, TransformKind};

pub const MAX_ESCAPE_ITERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeConfig {
    /// Beta parameter of the mixing weight.
    pub alpha1: f64,
    /// Upper bound of the uniformly drawn step count, in `1..=4`.
    pub max_iters: usize,
    /// Per-step probability of choosing an auxiliary mix over a transform.
    pub p_mix: f64,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        Self {
            alpha1: 3.0,
            max_iters: MAX_ESCAPE_ITERS,
            p_mix: 0.5,
        }
    }
}

impl EscapeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha1.is_finite() || self.alpha1 <= 0.0 {
            return Err(AresError::config("alpha1", format!("must be > 0, got {}", self.alpha1)));
        }
        if !(1..=MAX_ESCAPE_ITERS).contains(&self.max_iters) {
            return Err(AresError::config(
                "max_iters",
                format!("must be in 1..={MAX_ESCAPE_ITERS}, got {}", self.max_iters),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_mix) {
            return Err(AresError::config("p_mix", format!("must be in [0, 1], got {}", self.p_mix)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EscapeStep {
    Mix { aux_index: usize, lambda: f64 },
    Transform(Transform),
}

/// Record of the steps applied to one instance, in order. A trailing forced mix
/// is flagged by `forced_mix`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EscapeTrace {
    pub steps: Vec<EscapeStep>,
    pub forced_mix: bool,
}

impl EscapeTrace {
    pub fn mix_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s, EscapeStep::Mix { .. }))
            .count()
    }

    pub fn lambdas(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().filter_map(|s| match s {
            EscapeStep::Mix { lambda, .. } => Some(*lambda),
            _ => None,
        })
    }
}

fn mix(x: &mut [f64], aux: &[f64], lambda: f64) {
    for (a, f) in x.iter_mut().zip(aux) {
        *a = lambda * *a + (1.0 - lambda) * f;
    }
}

/// Escape with an injectable mixing-weight source; `draw_lambda` replaces the
/// `Beta(alpha1, alpha1)` draw.
pub fn escape_instance_with(
    x: &LabeledVector,
    aux: &[AuxVector],
    cfg: &EscapeConfig,
    center: &[f64],
    rng: &mut Rng,
    mut draw_lambda: impl FnMut(&mut Rng) -> Result<f64>,
) -> Result<(LabeledVector, EscapeTrace)> {
    if aux.is_empty() {
        return Err(AresError::invalid_input("escape needs a nonempty auxiliary set"));
    }
    let d = x.x.len();
    if aux[0].x.len() != d || center.len() != d {
        return Err(AresError::invalid_input(format!(
            "escape dimension mismatch: instance {d}, aux {}, center {}",
            aux[0].x.len(),
            center.len()
        )));
    }
    let mut out = x.x.clone();
    let mut trace = EscapeTrace::default();
    let n_steps = 1 + rng.below(cfg.max_iters);
    for _ in 0..n_steps {
        if rng.uniform() < cfg.p_mix {
            let aux_index = rng.below(aux.len());
            let lambda = draw_lambda(rng)?;
            mix(&mut out, &aux[aux_index].x, lambda);
            trace.steps.push(EscapeStep::Mix { aux_index, lambda });
        } else {
            let kind = TransformKind::ALL[rng.below(TransformKind::ALL.len())];
            let t = Transform::sample(kind, d, rng)?;
            out = apply_transform(&out, &t, center);
            trace.steps.push(EscapeStep::Transform(t));
        }
    }
    if trace.mix_count() == 0 {
        let aux_index = rng.below(aux.len());
        let lambda = draw_lambda(rng)?;
        mix(&mut out, &aux[aux_index].x, lambda);
        trace.steps.push(EscapeStep::Mix { aux_index, lambda });
        trace.forced_mix = true;
    }
    Ok((LabeledVector { x: out, y: x.y }, trace))
}

/// Escapes one instance; transforms act about `center`.
pub fn escape_instance(
    x: &LabeledVector,
    aux: &[AuxVector],
    cfg: &EscapeConfig,
    center: &[f64],
    rng: &mut Rng,
) -> Result<LabeledVector> {
    let alpha = cfg.alpha1;
    escape_instance_with(x, aux, cfg, center, rng, |r| r.beta(alpha)).map(|(v, _)| v)
}

/// Escapes every instance with its own child stream `("escape", i)` of `rng`,
/// returning the surrogate set and per-instance traces.
pub fn escape_dataset_traced(
    data: &[LabeledVector],
    aux: &[AuxVector],
    cfg: &EscapeConfig,
    rng: &Rng,
) -> Result<(Vec<LabeledVector>, Vec<EscapeTrace>)> {
    cfg.validate()?;
    let d = data.first().map_or(0, |p| p.x.len());
    let center = crate::synthdata::mean_of(data.iter().map(|p| p.x.as_slice()), d);
    let alpha = cfg.alpha1;
    let mut out = Vec::with_capacity(data.len());
    let mut traces = Vec::with_capacity(data.len());
    for (i, x) in data.iter().enumerate() {
        let mut r = rng.child_indexed("escape", i as u64);
        let (v, t) = escape_instance_with(x, aux, cfg, &center, &mut r, |r| r.beta(alpha))
            .map_err(|e| e.context(format!("escaping instance {i}")))?;
        out.push(v);
        traces.push(t);
    }
    Ok((out, traces))
}

pub fn escape_dataset(
    data: &[LabeledVector],
    aux: &[AuxVector],
    cfg: &EscapeConfig,
    rng: &Rng,
) -> Result<Vec<LabeledVector>> {
    escape_dataset_traced(data, aux, cfg, rng).map(|(v, _)| v)
}
