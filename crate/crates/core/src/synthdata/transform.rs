// SPDX-License-Identifier: Apache-2.0

//! Bijective vector analogues of image-space geometric augmentations.

use serde::{Deserialize, Serialize};

use crate::error::{AresError, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    Rotate2d,
    Flip,
    Permute,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [TransformKind::Rotate2d, TransformKind::Flip, TransformKind::Permute];
}

/// A concrete transform with all random choices resolved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    /// Rotation by `angle` in the `(i, j)` coordinate plane about the center.
    Rotate2d { i: usize, j: usize, angle: f64 },
    /// Reflection of coordinate `i` about the center.
    Flip { i: usize },
    /// Swap of coordinates `i` and `j`.
    Permute { i: usize, j: usize },
}

fn distinct_pair(d: usize, rng: &mut Rng) -> (usize, usize) {
    let i = rng.below(d);
    let mut j = rng.below(d - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

impl Transform {
    pub fn sample(kind: TransformKind, d: usize, rng: &mut Rng) -> Result<Self> {
        if d < 2 {
            return Err(AresError::invalid_input(format!(
                "geometric transforms need d >= 2, got {d}"
            )));
        }
        Ok(match kind {
            TransformKind::Rotate2d => {
                let (i, j) = distinct_pair(d, rng);
                Transform::Rotate2d {
                    i,
                    j,
                    angle: rng.uniform_range(0.0, std::f64::consts::TAU),
                }
            }
            TransformKind::Flip => Transform::Flip { i: rng.below(d) },
            TransformKind::Permute => {
                let (i, j) = distinct_pair(d, rng);
                Transform::Permute { i, j }
            }
        })
    }
}

pub fn apply_transform(x: &[f64], t: &Transform, center: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    match *t {
        Transform::Rotate2d { i, j, angle } => {
            let (s, c) = angle.sin_cos();
            let (u, v) = (x[i] - center[i], x[j] - center[j]);
            out[i] = center[i] + c * u - s * v;
            out[j] = center[j] + s * u + c * v;
        }
        Transform::Flip { i } => out[i] = 2.0 * center[i] - x[i],
        Transform::Permute { i, j } => out.swap(i, j),
    }
    out
}

/// Samples a transform of `kind` and applies it about `center` (the data mean).
pub fn geometric_transform(
    x: &[f64],
    kind: TransformKind,
    center: &[f64],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if center.len() != x.len() {
        return Err(AresError::invalid_input("transform center dimension mismatch"));
    }
    let t = Transform::sample(kind, x.len(), rng)?;
    Ok(apply_transform(x, &t, center))
}
