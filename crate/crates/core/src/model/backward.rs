// SPDX-License-Identifier: Apache-2.0

//! Reverse mode for the fixed architecture and the composite training loss.

use serde::{Deserialize, Serialize};

use super::{cross_entropy_loss, softmax, GradientTape, MlpNetwork};
use crate::divergence::{
    ce_logistic_loss_grad, jsd_discrimination_loss_grad, nce_loss_grad, total_loss, LossBreakdown,
    DIV_GUARD,
};
use crate::error::{AresError, Result};

/// Cached activations of a batch, tied to the parameter version they were computed with.
#[derive(Clone, Debug)]
pub struct BatchForward {
    version: u64,
    /// Per sample: `[input, layer1, ..., feature]`.
    acts: Vec<Vec<Vec<f64>>>,
    logits: Vec<Vec<f64>>,
}

impl BatchForward {
    pub fn len(&self) -> usize {
        self.acts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.acts[i].last().expect("activation stack is never empty")
    }

    pub fn logits(&self, i: usize) -> &[f64] {
        &self.logits[i]
    }
}

impl MlpNetwork {
    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<BatchForward> {
        let mut acts = Vec::with_capacity(xs.len());
        let mut logits = Vec::with_capacity(xs.len());
        for x in xs {
            if x.len() != self.input_dim() {
                return Err(AresError::invalid_input(format!(
                    "input has dimension {}, network expects {}",
                    x.len(),
                    self.input_dim()
                )));
            }
            let mut stack = Vec::with_capacity(self.ext.len() + 1);
            stack.push(x.to_vec());
            for layer in &self.ext {
                let mut a = layer.affine(stack.last().unwrap());
                a.iter_mut().for_each(|v| *v = v.max(0.0));
                stack.push(a);
            }
            logits.push(self.cls.affine(stack.last().unwrap()));
            acts.push(stack);
        }
        Ok(BatchForward {
            version: self.version,
            acts,
            logits,
        })
    }

    fn check_fresh(&self, cache: &BatchForward) -> Result<()> {
        if cache.version != self.version {
            return Err(AresError::Contract(format!(
                "forward cache from parameter version {} used at version {}",
                cache.version, self.version
            )));
        }
        Ok(())
    }
}

/// Accumulates classifier gradients for one feature and returns `∂L/∂feature`.
fn backward_cls(net: &MlpNetwork, feat: &[f64], dz: &[f64], grads: &mut MlpNetwork) -> Vec<f64> {
    let p = net.cls.inputs;
    let mut dfeat = vec![0.0; p];
    for (k, &g) in dz.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &net.cls.w[k * p..(k + 1) * p];
        let grow = &mut grads.cls.w[k * p..(k + 1) * p];
        for j in 0..p {
            grow[j] += g * feat[j];
            dfeat[j] += g * row[j];
        }
        grads.cls.b[k] += g;
    }
    dfeat
}

fn backward_ext(net: &MlpNetwork, acts: &[Vec<f64>], dfeat: Vec<f64>, grads: &mut MlpNetwork) {
    let mut delta = dfeat;
    for l in (0..net.ext.len()).rev() {
        let layer = &net.ext[l];
        let out = &acts[l + 1];
        let inp = &acts[l];
        for (d, a) in delta.iter_mut().zip(out) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        let g = &mut grads.ext[l];
        let mut next = if l > 0 { vec![0.0; layer.inputs] } else { Vec::new() };
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &layer.w[o * layer.inputs..(o + 1) * layer.inputs];
            let grow = &mut g.w[o * layer.inputs..(o + 1) * layer.inputs];
            for i in 0..layer.inputs {
                grow[i] += d * inp[i];
            }
            g.b[o] += d;
            if l > 0 {
                for i in 0..layer.inputs {
                    next[i] += d * row[i];
                }
            }
        }
        delta = next;
    }
}

/// `π_k = w_k·exp(z_k) / Σ_j w_j·exp(z_j)`; the energy gradient is `−π` for both
/// logits and log-weights.
fn energy_and_weights(z: &[f64], log_w: &[f64]) -> (f64, Vec<f64>) {
    let shifted: Vec<f64> = z.iter().zip(log_w).map(|(a, b)| a + b).collect();
    let pi = softmax(&shifted);
    (super::energy_from_log_weights(z, log_w), pi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Jsd,
    Ce,
    Nce,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "jsd" => Some(LossKind::Jsd),
            "ce" => Some(LossKind::Ce),
            "nce" => Some(LossKind::Nce),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Jsd => "jsd",
            LossKind::Ce => "ce",
            LossKind::Nce => "nce",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub beta: f64,
    pub nce_temperature: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Jsd,
            beta: 0.1,
            nce_temperature: 0.1,
        }
    }
}

/// Virtual outliers entering the discrimination term.
pub enum VirtualSource<'a> {
    /// Feature vectors treated as constants.
    Detached(&'a [Vec<f64>]),
    /// `v = λ·f(x_a) + (1−λ)·f(x_b)` recomputed from `cache`, with gradients
    /// flowing back into the extractor through both sources.
    Attached {
        cache: &'a BatchForward,
        pairs: &'a [(usize, usize, f64)],
    },
}

/// Evaluates the training loss for one batch and, when `tape` is given,
/// accumulates its exact gradient.
///
/// Without virtual outliers the loss is the mean cross-entropy. With them,
/// `jsd` adds `β/(L_dis + guard)`, while `ce` and `nce` add `β·L_dis`.
pub fn loss_and_backward(
    net: &MlpNetwork,
    batch: &BatchForward,
    labels: &[usize],
    virt: Option<VirtualSource<'_>>,
    spec: &LossSpec,
    mut tape: Option<&mut GradientTape>,
) -> Result<LossBreakdown> {
    net.check_fresh(batch)?;
    let b = batch.len();
    if b == 0 || labels.len() != b {
        return Err(AresError::invalid_input(format!(
            "batch of {b} inputs with {} labels",
            labels.len()
        )));
    }
    if let Some(t) = tape.as_deref() {
        if !net.same_layout(&t.grads) {
            return Err(AresError::Contract("gradient tape layout does not match the network".into()));
        }
    }
    let k = net.classes();
    let inv_b = 1.0 / b as f64;
    let mut cls = 0.0;
    let mut dlogits: Vec<Vec<f64>> = Vec::with_capacity(b);
    for i in 0..b {
        let z = batch.logits(i);
        cls += cross_entropy_loss(z, labels[i])?;
        let mut g = softmax(z);
        g[labels[i]] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv_b);
        dlogits.push(g);
    }
    cls *= inv_b;

    let Some(virt) = virt else {
        if let Some(t) = tape.as_deref_mut() {
            for i in 0..b {
                let df = backward_cls(net, batch.feature(i), &dlogits[i], &mut t.grads);
                backward_ext(net, &batch.acts[i], df, &mut t.grads);
            }
        }
        return Ok(LossBreakdown {
            cls,
            dis: 0.0,
            total: cls,
            beta: spec.beta,
        });
    };

    let v_feats: Vec<Vec<f64>> = match &virt {
        VirtualSource::Detached(f) => f.to_vec(),
        VirtualSource::Attached { cache, pairs } => {
            net.check_fresh(cache)?;
            pairs
                .iter()
                .map(|&(a, c, lam)| {
                    cache
                        .feature(a)
                        .iter()
                        .zip(cache.feature(c))
                        .map(|(x, y)| lam * x + (1.0 - lam) * y)
                        .collect()
                })
                .collect()
        }
    };
    if v_feats.is_empty() {
        return Err(AresError::invalid_input("empty virtual outlier batch"));
    }

    let (e_id, pi_id): (Vec<f64>, Vec<Vec<f64>>) = (0..b)
        .map(|i| energy_and_weights(batch.logits(i), &net.energy_free))
        .unzip();
    let z_v: Vec<Vec<f64>> = v_feats
        .iter()
        .map(|f| net.classify(f))
        .collect::<Result<_>>()?;
    let (e_v, pi_v): (Vec<f64>, Vec<Vec<f64>>) = z_v
        .iter()
        .map(|z| energy_and_weights(z, &net.energy_free))
        .unzip();

    let (dis, g_id, g_v, g_head) = match spec.kind {
        LossKind::Jsd => {
            let (l, gi, gv) = jsd_discrimination_loss_grad(&e_id, &e_v)?;
            (l, gi, gv, [0.0, 0.0])
        }
        LossKind::Ce => ce_logistic_loss_grad(&e_id, &e_v, &net.head)?,
        LossKind::Nce => nce_loss_grad(&e_id, &e_v, &net.head, spec.nce_temperature)?,
    };
    let (total, coef) = match spec.kind {
        LossKind::Jsd => {
            let denom = dis + DIV_GUARD;
            (total_loss(cls, dis, spec.beta), -spec.beta / (denom * denom))
        }
        LossKind::Ce | LossKind::Nce => (cls + spec.beta * dis, spec.beta),
    };
    let breakdown = LossBreakdown {
        cls,
        dis,
        total,
        beta: spec.beta,
    };

    let Some(t) = tape else {
        return Ok(breakdown);
    };
    let grads = &mut t.grads;

    for i in 0..b {
        let ge = coef * g_id[i];
        if ge != 0.0 {
            for kk in 0..k {
                dlogits[i][kk] -= ge * pi_id[i][kk];
                grads.energy_free[kk] -= ge * pi_id[i][kk];
            }
        }
    }

    let mut src_dfeat: Option<Vec<Vec<f64>>> = match &virt {
        VirtualSource::Attached { cache, .. } => Some(vec![vec![0.0; net.feature_dim()]; cache.len()]),
        VirtualSource::Detached(_) => None,
    };
    for (j, f) in v_feats.iter().enumerate() {
        let ge = coef * g_v[j];
        let dz: Vec<f64> = pi_v[j].iter().map(|p| -ge * p).collect();
        for kk in 0..k {
            grads.energy_free[kk] += dz[kk];
        }
        let dv = backward_cls(net, f, &dz, grads);
        if let (Some(acc), VirtualSource::Attached { pairs, .. }) = (src_dfeat.as_mut(), &virt) {
            let (a, c, lam) = pairs[j];
            for (q, g) in dv.iter().enumerate() {
                acc[a][q] += lam * g;
                acc[c][q] += (1.0 - lam) * g;
            }
        }
    }
    grads.head.weight += coef * g_head[0];
    grads.head.bias += coef * g_head[1];

    for i in 0..b {
        let df = backward_cls(net, batch.feature(i), &dlogits[i], grads);
        backward_ext(net, &batch.acts[i], df, grads);
    }
    if let (Some(acc), VirtualSource::Attached { cache, .. }) = (src_dfeat, &virt) {
        for (s, df) in acc.into_iter().enumerate() {
            if df.iter().any(|v| *v != 0.0) {
                backward_ext(net, &cache.acts[s], df, grads);
            }
        }
    }
    Ok(breakdown)
}
