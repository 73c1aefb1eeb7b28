// SPDX-License-Identifier: Apache-2.0

//! Desk-scale data worlds: labeled ID data, a structurally complex auxiliary
//! set standing in for fractal images, and disjoint OOD evaluation sets.

mod csv;
mod generators;
mod ifs;
mod transform;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AresError, Result};
use crate::numerics::Rng;

pub use csv::{read_points_csv, write_points_csv, PointFile, PointRole};
pub use generators::{make_id_dataset, make_ood_eval, IdGenerator, OodGenerator};
pub use ifs::{chaos_game, make_aux_dataset, random_ifs, AffineMap, IFS_BURN_IN};
pub use transform::{apply_transform, geometric_transform, Transform, TransformKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledVector {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxVector {
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl BoundingBox {
    pub fn of<'a>(points: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut iter = points.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| AresError::invalid_input("bounding box of an empty point set"))?;
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for x in iter {
            if x.len() != min.len() {
                return Err(AresError::invalid_input("bounding box over mixed dimensions"));
            }
            for (i, &v) in x.iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.min.iter().zip(&self.max))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }
}

/// Named OOD evaluation set recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodSetSpec {
    pub name: String,
    pub generator: OodGenerator,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub generator: IdGenerator,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub dim: usize,
    /// `None` means `|F| = |D|`.
    pub aux_n: Option<usize>,
    pub ifs_maps: usize,
    pub ood: Vec<OodSetSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: IdGenerator::default(),
            n_train: 1200,
            n_test: 600,
            classes: 3,
            dim: 2,
            aux_n: None,
            ifs_maps: 3,
            ood: vec![
                OodSetSpec {
                    name: "ring".into(),
                    generator: OodGenerator::Ring {
                        inner: 7.0,
                        outer: 9.0,
                    },
                    n: 600,
                },
                OodSetSpec {
                    name: "uniform".into(),
                    generator: OodGenerator::Uniform { margin: 0.0 },
                    n: 600,
                },
                OodSetSpec {
                    name: "shifted-blobs".into(),
                    generator: OodGenerator::ShiftedBlobs { offset: 3.0 },
                    n: 600,
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub generator: String,
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataBundle {
    pub id_train: Vec<LabeledVector>,
    pub id_test: Vec<LabeledVector>,
    pub aux: Vec<AuxVector>,
    /// Ordered by name.
    pub ood_eval: Vec<(String, Vec<Vec<f64>>)>,
    pub meta: BundleMeta,
}

impl DataBundle {
    /// Generates every set from independent child streams of `seed`.
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Self> {
        let root = Rng::new(seed).child("data");
        let id_train = make_id_dataset(
            &cfg.generator,
            cfg.n_train,
            cfg.classes,
            cfg.dim,
            &mut root.child("id_train"),
        )?;
        let id_test = make_id_dataset(
            &cfg.generator,
            cfg.n_test,
            cfg.classes,
            cfg.dim,
            &mut root.child("id_test"),
        )?;
        let bbox = BoundingBox::of(id_train.iter().map(|p| p.x.as_slice()))?;
        let aux = make_aux_dataset(
            cfg.aux_n.unwrap_or(cfg.n_train),
            cfg.dim,
            &mut root.child("aux"),
            cfg.ifs_maps,
            &bbox,
        )?;
        let mut ood_eval = Vec::with_capacity(cfg.ood.len());
        for set in &cfg.ood {
            let pts = make_ood_eval(
                &set.generator,
                &cfg.generator,
                set.n,
                cfg.classes,
                &bbox,
                &mut root.child(&format!("ood/{}", set.name)),
            )
            .map_err(|e| e.context(format!("ood set `{}`", set.name)))?;
            ood_eval.push((set.name.clone(), pts));
        }
        ood_eval.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self {
            id_train,
            id_test,
            aux,
            ood_eval,
            meta: BundleMeta {
                generator: cfg.generator.name().to_string(),
                seed,
                dim: cfg.dim,
                classes: cfg.classes,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn classes(&self) -> usize {
        self.meta.classes
    }

    pub fn id_bbox(&self) -> Result<BoundingBox> {
        BoundingBox::of(self.id_train.iter().map(|p| p.x.as_slice()))
    }

    /// Writes `id_train.csv`, `id_test.csv`, `aux.csv`, `ood_<name>.csv` and `meta.json`.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| AresError::io(dir, e))?;
        let k = self.classes();
        let d = self.dim();
        let mut written = Vec::new();
        let labeled = |v: &[LabeledVector]| -> Vec<(i64, Vec<f64>)> {
            v.iter().map(|p| (p.y as i64, p.x.clone())).collect()
        };
        let mut emit = |name: String, role: PointRole, rows: Vec<(i64, Vec<f64>)>| -> Result<()> {
            let path = dir.join(name);
            write_points_csv(&path, &PointFile { dim: d, classes: k, role, rows })?;
            written.push(path);
            Ok(())
        };
        emit("id_train.csv".into(), PointRole::Id, labeled(&self.id_train))?;
        emit("id_test.csv".into(), PointRole::Id, labeled(&self.id_test))?;
        emit(
            "aux.csv".into(),
            PointRole::Aux,
            self.aux.iter().map(|a| (-1, a.x.clone())).collect(),
        )?;
        for (name, pts) in &self.ood_eval {
            emit(
                format!("ood_{name}.csv"),
                PointRole::Ood,
                pts.iter().map(|x| (-1, x.clone())).collect(),
            )?;
        }
        let meta_path = dir.join("meta.json");
        let json = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&meta_path, json + "\n").map_err(|e| AresError::io(&meta_path, e))?;
        written.push(meta_path);
        Ok(written)
    }

    /// Loads a directory written by [`save`](Self::save). `meta.json` is optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let need = |name: &str| -> Result<PointFile> {
            let path = dir.join(name);
            if !path.exists() {
                return Err(AresError::invalid_input(format!(
                    "missing dataset file {}",
                    path.display()
                )));
            }
            read_points_csv(&path)
        };
        let train = need("id_train.csv")?;
        let test = need("id_test.csv")?;
        let aux = need("aux.csv")?;
        let to_labeled = |f: PointFile, name: &str| -> Result<Vec<LabeledVector>> {
            f.rows
                .into_iter()
                .map(|(y, x)| {
                    usize::try_from(y)
                        .map(|y| LabeledVector { x, y })
                        .map_err(|_| AresError::invalid_input(format!("{name}: unlabeled row in ID file")))
                })
                .collect()
        };
        let (dim, classes) = (train.dim, train.classes);
        for (f, name) in [(&test, "id_test.csv"), (&aux, "aux.csv")] {
            if f.dim != dim {
                return Err(AresError::invalid_input(format!(
                    "{name} has dim={} but id_train.csv has dim={dim}",
                    f.dim
                )));
            }
        }
        let mut ood_eval = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|e| AresError::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| AresError::io(dir, e))?;
            let fname = entry.file_name().to_string_lossy().to_string();
            if let Some(name) = fname.strip_prefix("ood_").and_then(|s| s.strip_suffix(".csv")) {
                let f = read_points_csv(&entry.path())?;
                if f.dim != dim {
                    return Err(AresError::invalid_input(format!(
                        "{fname} has dim={} but id_train.csv has dim={dim}",
                        f.dim
                    )));
                }
                ood_eval.push((name.to_string(), f.rows.into_iter().map(|(_, x)| x).collect()));
            }
        }
        ood_eval.sort_by(|a: &(String, Vec<Vec<f64>>), b| a.0.cmp(&b.0));
        let meta_path = dir.join("meta.json");
        let meta = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| AresError::io(&meta_path, e))?;
            serde_json::from_str(&text)?
        } else {
            BundleMeta {
                generator: "unknown".into(),
                seed: 0,
                dim,
                classes,
            }
        };
        Ok(Self {
            id_train: to_labeled(train, "id_train.csv")?,
            id_test: to_labeled(test, "id_test.csv")?,
            aux: aux.rows.into_iter().map(|(_, x)| AuxVector { x }).collect(),
            ood_eval,
            meta,
        })
    }

    /// Column-wise mean of the ID training inputs.
    pub fn id_mean(&self) -> Vec<f64> {
        mean_of(self.id_train.iter().map(|p| p.x.as_slice()), self.dim())
    }
}

pub(crate) fn mean_of<'a>(points: impl IntoIterator<Item = &'a [f64]>, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    let mut n = 0usize;
    for x in points {
        for (a, b) in m.iter_mut().zip(x) {
            *a += b;
        }
        n += 1;
    }
    if n > 0 {
        m.iter_mut().for_each(|a| *a /= n as f64);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = DataConfig::default();
        let a = DataBundle::generate(&cfg, 9).unwrap();
        let b = DataBundle::generate(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = DataBundle::generate(&cfg, 10).unwrap();
        assert_ne!(a.id_train, c.id_train);
    }

    #[test]
    fn bundle_invariants() {
        let b = DataBundle::generate(&DataConfig::default(), 1).unwrap();
        let classes = |v: &[LabeledVector]| {
            let mut s: Vec<usize> = v.iter().map(|p| p.y).collect();
            s.sort();
            s.dedup();
            s
        };
        assert_eq!(classes(&b.id_train), classes(&b.id_test));
        assert_eq!(b.aux.len(), b.id_train.len());
        let bbox = b.id_bbox().unwrap();
        for a in &b.aux {
            assert!(bbox.contains(&a.x));
        }
        let all_finite = b.id_train.iter().map(|p| &p.x).chain(b.id_test.iter().map(|p| &p.x))
            .chain(b.aux.iter().map(|a| &a.x))
            .chain(b.ood_eval.iter().flat_map(|(_, v)| v.iter()))
            .all(|x| x.iter().all(|v| v.is_finite()));
        assert!(all_finite);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let b = DataBundle::generate(&DataConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let back = DataBundle::load(dir.path()).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn load_names_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = DataBundle::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("id_train.csv"), "{err}");
    }
}
