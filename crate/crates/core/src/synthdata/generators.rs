// SPDX-License-Identifier: Apache-2.0

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, LabeledVector};
use crate::error::{AresError, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IdGenerator {
    /// Isotropic Gaussian clusters. Without explicit centers, class `c` sits at
    /// angle `2πc/k` on a circle of `center_radius` in the first two coordinates.
    Blobs {
        center_radius: f64,
        spread: f64,
        centers: Option<Vec<Vec<f64>>>,
    },
    /// Two interleaved half circles (k = 2, d = 2).
    Moons2d { noise: f64 },
    /// `k` concentric shells of radius `gap·(c+1)` and radial thickness `width`.
    Rings { gap: f64, width: f64 },
}

impl Default for IdGenerator {
    fn default() -> Self {
        IdGenerator::Blobs {
            center_radius: 4.0,
            spread: 0.5,
            centers: None,
        }
    }
}

impl IdGenerator {
    /// Generator by name with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "blobs" => Ok(Self::default()),
            "moons2d" => Ok(IdGenerator::Moons2d { noise: 0.1 }),
            "rings" => Ok(IdGenerator::Rings {
                gap: 2.0,
                width: 0.5,
            }),
            other => Err(AresError::config(
                "generator",
                format!("unknown ID generator `{other}` (expected blobs, moons2d, rings)"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            IdGenerator::Blobs { .. } => "blobs",
            IdGenerator::Moons2d { .. } => "moons2d",
            IdGenerator::Rings { .. } => "rings",
        }
    }

    /// Cluster centers for the blobs generator.
    pub fn blob_centers(&self, k: usize, d: usize) -> Result<Vec<Vec<f64>>> {
        let IdGenerator::Blobs {
            center_radius,
            centers,
            ..
        } = self
        else {
            return Err(AresError::config(
                "generator",
                "blob centers requested from a non-blobs generator",
            ));
        };
        if let Some(c) = centers {
            if c.len() != k || c.iter().any(|v| v.len() != d) {
                return Err(AresError::config(
                    "centers",
                    format!("expected {k} centers of dimension {d}"),
                ));
            }
            return Ok(c.clone());
        }
        Ok((0..k)
            .map(|c| {
                let a = 2.0 * PI * c as f64 / k as f64;
                let mut v = vec![0.0; d];
                v[0] = center_radius * a.cos();
                v[1] = center_radius * a.sin();
                v
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OodGenerator {
    /// Spherical shell around the origin with radius uniform in `[inner, outer]`.
    Ring { inner: f64, outer: f64 },
    /// Uniform over the ID bounding box, widened by `margin` of its extent on every side.
    Uniform { margin: f64 },
    /// The ID blobs with every center pushed radially outward by `offset`.
    ShiftedBlobs { offset: f64 },
}

impl OodGenerator {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ring" => Ok(OodGenerator::Ring {
                inner: 7.0,
                outer: 9.0,
            }),
            "uniform" => Ok(OodGenerator::Uniform { margin: 0.0 }),
            "shifted-blobs" => Ok(OodGenerator::ShiftedBlobs { offset: 3.0 }),
            other => Err(AresError::config(
                "ood",
                format!("unknown OOD generator `{other}` (expected ring, uniform, shifted-blobs)"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OodGenerator::Ring { .. } => "ring",
            OodGenerator::Uniform { .. } => "uniform",
            OodGenerator::ShiftedBlobs { .. } => "shifted-blobs",
        }
    }
}

fn unit_direction(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn blob_point(center: &[f64], spread: f64, rng: &mut Rng) -> Vec<f64> {
    center.iter().map(|c| c + spread * rng.normal()).collect()
}

/// `n` labeled points, class of point `i` is `i mod k`.
pub fn make_id_dataset(
    generator: &IdGenerator,
    n: usize,
    k: usize,
    d: usize,
    rng: &mut Rng,
) -> Result<Vec<LabeledVector>> {
    if k < 2 || n < k {
        return Err(AresError::invalid_param(format!(
            "need n >= k >= 2, got n={n}, k={k}"
        )));
    }
    if d < 2 {
        return Err(AresError::invalid_param(format!("need d >= 2, got {d}")));
    }
    match generator {
        IdGenerator::Blobs { spread, .. } => {
            if !(*spread >= 0.0) {
                return Err(AresError::config("spread", "must be >= 0"));
            }
            let centers = generator.blob_centers(k, d)?;
            Ok((0..n)
                .map(|i| {
                    let y = i % k;
                    LabeledVector {
                        x: blob_point(&centers[y], *spread, rng),
                        y,
                    }
                })
                .collect())
        }
        IdGenerator::Moons2d { noise } => {
            if k != 2 || d != 2 {
                return Err(AresError::config(
                    "generator",
                    format!("moons2d requires classes=2 and dim=2, got classes={k}, dim={d}"),
                ));
            }
            Ok((0..n)
                .map(|i| {
                    let y = i % 2;
                    let t = PI * rng.uniform();
                    let (bx, by) = if y == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    LabeledVector {
                        x: vec![bx + noise * rng.normal(), by + noise * rng.normal()],
                        y,
                    }
                })
                .collect())
        }
        IdGenerator::Rings { gap, width } => Ok((0..n)
            .map(|i| {
                let y = i % k;
                let r = gap * (y + 1) as f64 + width * (rng.uniform() - 0.5);
                let dir = unit_direction(d, rng);
                LabeledVector {
                    x: dir.into_iter().map(|u| u * r).collect(),
                    y,
                }
            })
            .collect()),
    }
}

/// `n` unlabeled OOD points. `id_generator`, `k` and `id_bbox` describe the ID world
/// the set is defined against.
pub fn make_ood_eval(
    generator: &OodGenerator,
    id_generator: &IdGenerator,
    n: usize,
    k: usize,
    id_bbox: &BoundingBox,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let d = id_bbox.dim();
    if n == 0 {
        return Err(AresError::invalid_param("OOD set size must be >= 1"));
    }
    match generator {
        OodGenerator::Ring { inner, outer } => {
            if !(*inner >= 0.0 && outer >= inner) {
                return Err(AresError::config(
                    "ring",
                    format!("need 0 <= inner <= outer, got inner={inner}, outer={outer}"),
                ));
            }
            Ok((0..n)
                .map(|_| {
                    let r = inner + (outer - inner) * rng.uniform();
                    unit_direction(d, rng).into_iter().map(|u| u * r).collect()
                })
                .collect())
        }
        OodGenerator::Uniform { margin } => {
            if !(*margin >= 0.0) {
                return Err(AresError::config("uniform_margin", "must be >= 0"));
            }
            Ok((0..n)
                .map(|_| {
                    id_bbox
                        .min
                        .iter()
                        .zip(&id_bbox.max)
                        .map(|(lo, hi)| {
                            let pad = margin * (hi - lo);
                            rng.uniform_range(lo - pad, hi + pad)
                        })
                        .collect()
                })
                .collect())
        }
        OodGenerator::ShiftedBlobs { offset } => {
            let IdGenerator::Blobs { spread, .. } = id_generator else {
                return Err(AresError::config(
                    "ood",
                    "shifted-blobs requires the blobs ID generator",
                ));
            };
            let centers: Vec<Vec<f64>> = id_generator
                .blob_centers(k, d)?
                .into_iter()
                .map(|c| {
                    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        c.iter().map(|x| x + offset * x / norm).collect()
                    } else {
                        let mut v = c.clone();
                        v[0] += offset;
                        v
                    }
                })
                .collect();
            Ok((0..n)
                .map(|i| blob_point(&centers[i % k], *spread, rng))
                .collect())
        }
    }
}
