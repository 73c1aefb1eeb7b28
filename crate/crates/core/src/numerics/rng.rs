// SPDX-License-Identifier: Apache-2.0

//! Seedable, splittable random source.
//!
//! Every draw in the pipeline goes through [`Rng`]. Child streams are derived
//! from the parent's *seed* and a label, never from its current state, so
//! adding or removing draws in one stage cannot perturb another stage.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{AresError, Result};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha12Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream named `label`, a pure function of `(self.seed, label)`.
    pub fn child(&self, label: &str) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes()))))
    }

    /// Like [`child`](Self::child) with an extra integer key (epoch, instance index, shard).
    pub fn child_indexed(&self, label: &str, index: u64) -> Self {
        let base = splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes())));
        Self::new(splitmix64(base ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// One draw from the symmetric `Beta(alpha, alpha)`.
    pub fn beta(&mut self, alpha: f64) -> Result<f64> {
        beta_sample(alpha, self)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// `m` distinct indices from `0..n`, uniformly without replacement.
    pub fn sample_indices(&mut self, n: usize, m: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, m.min(n)).into_vec()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Draws from `Beta(alpha, alpha)` via the gamma-ratio construction.
pub fn beta_sample(alpha: f64, rng: &mut Rng) -> Result<f64> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(AresError::invalid_param(format!(
            "beta parameter must be finite and > 0, got {alpha}"
        )));
    }
    let dist = Beta::new(alpha, alpha)
        .map_err(|e| AresError::invalid_param(format!("beta({alpha}, {alpha}): {e}")))?;
    Ok(dist.sample(&mut rng.inner))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_equal_streams() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn child_ignores_parent_draws() {
        let parent = Rng::new(7);
        let before = parent.child("escape").next_u64();
        let mut advanced = parent.clone();
        for _ in 0..100 {
            advanced.uniform();
        }
        assert_eq!(advanced.child("escape").next_u64(), before);
        assert_ne!(parent.child("expansion").next_u64(), before);
        assert_ne!(
            parent.child_indexed("escape", 0).next_u64(),
            parent.child_indexed("escape", 1).next_u64()
        );
    }

    #[test]
    fn beta_rejects_bad_alpha() {
        let mut rng = Rng::new(0);
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                beta_sample(bad, &mut rng),
                Err(AresError::InvalidParameter(_))
            ));
        }
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = Rng::new(1);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| rng.beta(1.0).unwrap()).collect();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (x - lo).abs().max((hi - x).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn beta_three_mean_is_half() {
        let mut rng = Rng::new(2);
        let n = 100_000;
        let mean = (0..n).map(|_| rng.beta(3.0).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn beta_two_stays_inside_unit_interval() {
        let mut rng = Rng::new(3);
        for _ in 0..100_000 {
            let x = rng.beta(2.0).unwrap();
            assert!(x > 0.0 && x < 1.0);
        }
    }
}
