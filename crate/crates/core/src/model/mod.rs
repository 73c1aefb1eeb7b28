// SPDX-License-Identifier: Apache-2.0

//! The network `f = f_cls ∘ f_ext` as a small ReLU perceptron, with learnable
//! positive energy weights and the logistic head used by the CE/NCE ablations.

mod backward;
mod checkpoint;
pub mod gradcheck;

use serde::{Deserialize, Serialize};

use crate::divergence::LogisticHead;
use crate::error::{AresError, Result};
use crate::numerics::Rng;

pub use backward::{loss_and_backward, BatchForward, LossKind, LossSpec, VirtualSource};
pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT};

/// Fully connected layer; `w` is `outputs × inputs`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    /// He-scaled normal weights (`std = √(2/inputs)`), zero bias.
    pub fn he(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let scale = (2.0 / inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            w: (0..inputs * outputs).map(|_| scale * rng.normal()).collect(),
            b: vec![0.0; outputs],
        }
    }

    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.w
            .chunks_exact(self.inputs)
            .zip(&self.b)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub feature: usize,
    pub classes: usize,
}

impl NetworkShape {
    /// `input → 64 → 64 → 16 → classes`.
    pub fn desk(input: usize, classes: usize) -> Self {
        Self {
            input,
            hidden: vec![64, 64],
            feature: 16,
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork {
    /// Feature extractor, ReLU after every layer including the last.
    pub ext: Vec<Dense>,
    pub cls: Dense,
    /// Energy weights are `exp(energy_free)`.
    pub energy_free: Vec<f64>,
    pub head: LogisticHead,
    /// Bumped on every parameter update; forward caches remember it.
    #[serde(skip)]
    pub(crate) version: u64,
}

impl MlpNetwork {
    pub fn new(shape: &NetworkShape, rng: &mut Rng) -> Result<Self> {
        if shape.input == 0 || shape.feature == 0 || shape.classes == 0 {
            return Err(AresError::invalid_param(format!("degenerate network shape {shape:?}")));
        }
        let mut dims = vec![shape.input];
        dims.extend(&shape.hidden);
        dims.push(shape.feature);
        let ext = dims.windows(2).map(|w| Dense::he(w[0], w[1], rng)).collect();
        Ok(Self {
            ext,
            cls: Dense::he(shape.feature, shape.classes, rng),
            energy_free: vec![0.0; shape.classes],
            head: LogisticHead::default(),
            version: 0,
        })
    }

    /// All parameters zero, energy weights one.
    pub fn zeros(shape: &NetworkShape) -> Self {
        let mut dims = vec![shape.input];
        dims.extend(&shape.hidden);
        dims.push(shape.feature);
        Self {
            ext: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            cls: Dense::zeros(shape.feature, shape.classes),
            energy_free: vec![0.0; shape.classes],
            head: LogisticHead::default(),
            version: 0,
        }
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            input: self.input_dim(),
            hidden: self.ext[..self.ext.len() - 1].iter().map(|l| l.outputs).collect(),
            feature: self.feature_dim(),
            classes: self.classes(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.ext[0].inputs
    }

    pub fn feature_dim(&self) -> usize {
        self.cls.inputs
    }

    pub fn classes(&self) -> usize {
        self.cls.outputs
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Penultimate-layer activations.
    pub fn forward_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(AresError::invalid_input(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut a = x.to_vec();
        for layer in &self.ext {
            a = layer.affine(&a);
            a.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(a)
    }

    /// Logits; no softmax.
    pub fn classify(&self, feat: &[f64]) -> Result<Vec<f64>> {
        if feat.len() != self.feature_dim() {
            return Err(AresError::invalid_input(format!(
                "feature has dimension {}, classifier expects {}",
                feat.len(),
                self.feature_dim()
            )));
        }
        Ok(self.cls.affine(feat))
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.classify(&self.forward_features(x)?)
    }

    pub fn energy_weights(&self) -> Vec<f64> {
        self.energy_free.iter().map(|f| f.exp()).collect()
    }

    /// `−log Σ_k w_k·exp(z_k)` for this network's weights.
    pub fn energy_score(&self, logits: &[f64]) -> f64 {
        assert_eq!(logits.len(), self.classes(), "logit count must equal class count");
        energy_from_log_weights(logits, &self.energy_free)
    }

    /// Energy score of a raw input.
    pub fn energy_of(&self, x: &[f64]) -> Result<f64> {
        Ok(self.energy_score(&self.logits(x)?))
    }

    /// Energy score of a feature vector.
    pub fn energy_of_feature(&self, feat: &[f64]) -> Result<f64> {
        Ok(self.energy_score(&self.classify(feat)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(predict_class(&self.logits(x)?))
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    /// Parameters in canonical order: ext layers (weights then biases), classifier,
    /// energy free parameters, head weight and bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> + '_ {
        self.ext
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b))
            .chain(self.cls.w.iter().chain(&self.cls.b))
            .chain(&self.energy_free)
            .chain(std::iter::once(&self.head.weight))
            .chain(std::iter::once(&self.head.bias))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.ext
            .iter_mut()
            .flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
            .chain(self.cls.w.iter_mut().chain(self.cls.b.iter_mut()))
            .chain(self.energy_free.iter_mut())
            .chain(std::iter::once(&mut self.head.weight))
            .chain(std::iter::once(&mut self.head.bias))
    }

    fn same_layout(&self, other: &MlpNetwork) -> bool {
        self.ext.len() == other.ext.len()
            && self
                .ext
                .iter()
                .zip(&other.ext)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
            && self.cls.inputs == other.cls.inputs
            && self.cls.outputs == other.cls.outputs
            && self.energy_free.len() == other.energy_free.len()
    }
}

/// Energy with explicit log-weights, max-shifted for overflow safety.
pub fn energy_from_log_weights(logits: &[f64], log_weights: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits
        .iter()
        .zip(log_weights)
        .map(|(z, lw)| (z - m + lw).exp())
        .sum();
    -(m + s.ln())
}

/// `−log Σ_k w_k·exp(z_k)`.
pub fn energy_score(logits: &[f64], weights: &[f64]) -> f64 {
    let lw: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    energy_from_log_weights(logits, &lw)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// `−log softmax(logits)[y]`.
pub fn cross_entropy_loss(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(AresError::invalid_input(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[y])
}

/// Arg-max with ties broken toward the lowest index.
pub fn predict_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = k;
        }
    }
    best
}

/// Gradient accumulators with the network's exact layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTape {
    pub grads: MlpNetwork,
}

impl GradientTape {
    pub fn for_network(net: &MlpNetwork) -> Self {
        let mut grads = net.clone();
        grads.params_mut().for_each(|p| *p = 0.0);
        Self { grads }
    }

    pub fn zero(&mut self) {
        self.grads.params_mut().for_each(|p| *p = 0.0);
    }

    pub fn is_zero(&self) -> bool {
        self.grads.params().all(|&g| g == 0.0)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.grads.params()
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales the whole gradient so its Euclidean norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            self.grads.params_mut().for_each(|g| *g *= s);
        }
        norm
    }
}

/// `θ ← θ − lr·∇θ`, then zeroes the tape.
pub fn sgd_step(net: &mut MlpNetwork, tape: &mut GradientTape, lr: f64) -> Result<()> {
    if !net.same_layout(&tape.grads) {
        return Err(AresError::Contract(
            "gradient tape layout does not match the network".into(),
        ));
    }
    for (p, g) in net.params_mut().zip(tape.grads.params()) {
        *p -= lr * g;
    }
    tape.zero();
    net.version += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn zero_network_gives_zero_features() {
        let net = MlpNetwork::zeros(&NetworkShape::desk(3, 4));
        assert_eq!(net.forward_features(&[1.0, -2.0, 5.0]).unwrap(), vec![0.0; 16]);
        let logits = net.classify(&[0.0; 16]).unwrap();
        assert_eq!(logits, net.cls.b);
        assert!(net.forward_features(&[1.0]).is_err());
        assert!(net.classify(&[1.0]).is_err());
    }

    #[test]
    fn identity_layer_passes_nonnegative_input() {
        let shape = NetworkShape {
            input: 3,
            hidden: vec![],
            feature: 3,
            classes: 2,
        };
        let mut net = MlpNetwork::zeros(&shape);
        for i in 0..3 {
            net.ext[0].w[i * 3 + i] = 1.0;
        }
        let x = [0.5, 0.0, 2.25];
        assert_eq!(net.forward_features(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn random_net_is_finite() {
        let mut rng = Rng::new(4);
        let net = MlpNetwork::new(&NetworkShape::desk(5, 3), &mut rng).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| 10.0 * rng.normal()).collect();
            assert!(net.logits(&x).unwrap().iter().all(|v| v.is_finite()));
            assert!(net.energy_of(&x).unwrap().is_finite());
        }
        assert!(net.energy_weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn tie_breaks_to_lowest_class() {
        assert_eq!(predict_class(&[0.7, 0.7]), 0);
        assert_eq!(predict_class(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn softmax_normalizes() {
        let s: f64 = softmax(&[3.0, -1.0, 1000.0, 2.0]).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn energy_cases() {
        assert_eq!(energy_score(&[0.0], &[1.0]), 0.0);
        assert!((energy_score(&[0.0, 0.0], &[1.0, 1.0]) + 2f64.ln()).abs() < 1e-15);
        for a in [-800.0, -3.0, 0.0, 17.5, 900.0] {
            let e = energy_score(&[a, a], &[1.0, 1.0]);
            assert!((e - (-a - 2f64.ln())).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(cross_entropy_loss(&[500.0, -500.0], 0).unwrap() < 1e-12);
        let k = 5;
        let ce = cross_entropy_loss(&vec![0.3; k], 2).unwrap();
        assert!((ce - (k as f64).ln()).abs() < 1e-12);
        assert!(cross_entropy_loss(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn sgd_with_zero_lr_is_noop() {
        let mut rng = Rng::new(8);
        let mut net = MlpNetwork::new(&NetworkShape::desk(2, 2), &mut rng).unwrap();
        let before = net.clone();
        let mut tape = GradientTape::for_network(&net);
        tape.grads.params_mut().for_each(|g| *g = 1.0);
        sgd_step(&mut net, &mut tape, 0.0).unwrap();
        assert!(net.params().zip(before.params()).all(|(a, b)| a == b));
        assert!(tape.is_zero());
    }

    #[test]
    fn sgd_rejects_mismatched_tape() {
        let mut rng = Rng::new(8);
        let mut net = MlpNetwork::new(&NetworkShape::desk(2, 2), &mut rng).unwrap();
        let other = MlpNetwork::new(&NetworkShape::desk(3, 2), &mut rng).unwrap();
        let mut tape = GradientTape::for_network(&other);
        assert!(matches!(sgd_step(&mut net, &mut tape, 0.1), Err(AresError::Contract(_))));
    }

    proptest! {
        #[test]
        fn energy_shift_identity(z in proptest::collection::vec(-50.0..50.0f64, 1..6), c in -100.0..100.0f64) {
            let w: Vec<f64> = (0..z.len()).map(|k| 0.5 + k as f64).collect();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let lhs = energy_score(&shifted, &w);
            let rhs = energy_score(&z, &w) - c;
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }

        #[test]
        fn energy_joint_permutation_invariant(pairs in proptest::collection::vec((-30.0..30.0f64, 0.1..5.0f64), 1..6)) {
            let (z, w): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let (zr, wr): (Vec<f64>, Vec<f64>) = pairs.iter().rev().copied().unzip();
            let a = energy_score(&z, &w);
            let b = energy_score(&zr, &wr);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn cross_entropy_nonnegative(z in proptest::collection::vec(-100.0..100.0f64, 2..6), y in 0usize..2) {
            prop_assert!(cross_entropy_loss(&z, y).unwrap() >= 0.0);
        }
    }
}
