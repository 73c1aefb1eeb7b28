// SPDX-License-Identifier: Apache-2.0

//! Auxiliary "fractal" data from the chaos game on a random contractive IFS.

use super::{AuxVector, BoundingBox};
use crate::error::{AresError, Result};
use crate::numerics::Rng;

pub const IFS_BURN_IN: usize = 20;
const CONTRACTION_MIN: f64 = 0.3;
const CONTRACTION_MAX: f64 = 0.8;

/// `x ↦ A x + b` with `A` stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineMap {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| self.b[i] + (0..d).map(|j| self.a[i * d + j] * x[j]).sum::<f64>())
            .collect()
    }
}

/// Random orthogonal matrix via Gram–Schmidt on Gaussian columns.
fn random_orthogonal(d: usize, rng: &mut Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut q = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            q[i * d + j] = c[i];
        }
    }
    q
}

/// `maps` affine maps `A = Q·diag(c)`, `c_i ∈ [0.3, 0.8]`, `b ∈ [-1, 1]^d`.
/// Every map is a contraction with factor at most 0.8.
pub fn random_ifs(d: usize, maps: usize, rng: &mut Rng) -> Vec<AffineMap> {
    (0..maps)
        .map(|_| {
            let q = random_orthogonal(d, rng);
            let scales: Vec<f64> = (0..d)
                .map(|_| rng.uniform_range(CONTRACTION_MIN, CONTRACTION_MAX))
                .collect();
            let a = (0..d * d).map(|ij| q[ij] * scales[ij % d]).collect();
            let b = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            AffineMap { a, b }
        })
        .collect()
}

/// `n` chaos-game samples; each starts uniform in `[-1, 1]^d` and is emitted
/// after [`IFS_BURN_IN`] randomly chosen map applications.
pub fn chaos_game(maps: &[AffineMap], n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let d = maps[0].dim();
    (0..n)
        .map(|_| {
            let mut x: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            for _ in 0..IFS_BURN_IN {
                x = maps[rng.below(maps.len())].apply(&x);
            }
            x
        })
        .collect()
}

/// Min-max rescales each coordinate onto `bbox`; a constant coordinate maps to the box center.
fn rescale_into(points: &mut [Vec<f64>], bbox: &BoundingBox) {
    let d = bbox.dim();
    for j in 0..d {
        let lo = points.iter().map(|x| x[j]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|x| x[j]).fold(f64::NEG_INFINITY, f64::max);
        let (tlo, thi) = (bbox.min[j], bbox.max[j]);
        for x in points.iter_mut() {
            x[j] = if hi > lo {
                let t = (x[j] - lo) / (hi - lo);
                (tlo + t * (thi - tlo)).clamp(tlo, thi)
            } else {
                0.5 * (tlo + thi)
            };
        }
    }
}

pub fn make_aux_dataset(
    n: usize,
    d: usize,
    rng: &mut Rng,
    ifs_maps: usize,
    bbox: &BoundingBox,
) -> Result<Vec<AuxVector>> {
    if n == 0 {
        return Err(AresError::invalid_param("aux set size must be >= 1"));
    }
    if ifs_maps < 2 {
        return Err(AresError::invalid_param(format!("ifs_maps must be >= 2, got {ifs_maps}")));
    }
    if bbox.dim() != d {
        return Err(AresError::invalid_input(format!(
            "bounding box has dimension {}, aux dimension is {d}",
            bbox.dim()
        )));
    }
    let maps = random_ifs(d, ifs_maps, &mut rng.child("maps"));
    let mut pts = chaos_game(&maps, n, &mut rng.child("walk"));
    rescale_into(&mut pts, bbox);
    Ok(pts.into_iter().map(|x| AuxVector { x }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_maps_collapse_to_origin() {
        let half = AffineMap {
            a: vec![0.5, 0.0, 0.0, 0.5],
            b: vec![0.0, 0.0],
        };
        let pts = chaos_game(&[half.clone(), half], 200, &mut Rng::new(0));
        for x in pts {
            assert!(x.iter().all(|v| v.abs() <= 2f64.powi(-20)));
        }
    }

    #[test]
    fn random_maps_are_contractions() {
        let maps = random_ifs(3, 5, &mut Rng::new(1));
        let mut rng = Rng::new(2);
        for m in &maps {
            for _ in 0..100 {
                let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                let y: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                let fx = m.apply(&x);
                let fy = m.apply(&y);
                let dx = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let df = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(df <= 0.8 * dx + 1e-12);
                assert!(df >= 0.3 * dx - 1e-12);
            }
        }
    }

    #[test]
    fn outputs_inside_bbox() {
        let bbox = BoundingBox {
            min: vec![-3.0, 1.0, 0.0],
            max: vec![2.0, 5.0, 0.5],
        };
        let pts = make_aux_dataset(500, 3, &mut Rng::new(3), 4, &bbox).unwrap();
        assert!(pts.iter().all(|p| bbox.contains(&p.x)));
    }

    #[test]
    fn parameter_checks() {
        let bbox = BoundingBox {
            min: vec![0.0, 0.0],
            max: vec![1.0, 1.0],
        };
        assert!(make_aux_dataset(0, 2, &mut Rng::new(0), 3, &bbox).is_err());
        assert!(make_aux_dataset(10, 2, &mut Rng::new(0), 1, &bbox).is_err());
        assert!(make_aux_dataset(10, 3, &mut Rng::new(0), 3, &bbox).is_err());
    }
}
