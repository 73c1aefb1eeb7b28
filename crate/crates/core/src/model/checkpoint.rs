// SPDX-License-Identifier: Apache-2.0

//! JSON checkpoints of named parameter tensors with shape headers.
//!
//! Floats are written in shortest round-trip form, so save/load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dense, MlpNetwork};
use crate::divergence::LogisticHead;
use crate::error::{AresError, Result};
use crate::training::EpochRecord;

pub const CHECKPOINT_FORMAT: &str = "ares-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub epochs_completed: usize,
    pub config_hash: Option<String>,
    pub tensors: Vec<NamedTensor>,
    /// Training log up to `epochs_completed`, used to continue numbering on resume.
    #[serde(default)]
    pub log: Vec<EpochRecord>,
}

fn tensor(name: String, shape: Vec<usize>, data: &[f64]) -> NamedTensor {
    NamedTensor {
        name,
        shape,
        data: data.to_vec(),
    }
}

impl MlpNetwork {
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (l, layer) in self.ext.iter().enumerate() {
            out.push(tensor(format!("ext.{l}.weight"), vec![layer.outputs, layer.inputs], &layer.w));
            out.push(tensor(format!("ext.{l}.bias"), vec![layer.outputs], &layer.b));
        }
        out.push(tensor("cls.weight".into(), vec![self.cls.outputs, self.cls.inputs], &self.cls.w));
        out.push(tensor("cls.bias".into(), vec![self.cls.outputs], &self.cls.b));
        out.push(tensor("energy.free".into(), vec![self.energy_free.len()], &self.energy_free));
        out.push(tensor("head.params".into(), vec![2], &[self.head.weight, self.head.bias]));
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| -> Result<&NamedTensor> {
            let t = tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| AresError::invalid_input(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(AresError::invalid_input(format!(
                    "tensor `{name}` has shape {:?} but {} values",
                    t.shape,
                    t.data.len()
                )));
            }
            Ok(t)
        };
        let dense = |prefix: &str| -> Result<Dense> {
            let w = find(&format!("{prefix}.weight"))?;
            let b = find(&format!("{prefix}.bias"))?;
            if w.shape.len() != 2 || b.shape != [w.shape[0]] {
                return Err(AresError::invalid_input(format!(
                    "layer `{prefix}` has inconsistent shapes {:?} / {:?}",
                    w.shape, b.shape
                )));
            }
            Ok(Dense {
                inputs: w.shape[1],
                outputs: w.shape[0],
                w: w.data.clone(),
                b: b.data.clone(),
            })
        };
        let mut ext = Vec::new();
        while tensors.iter().any(|t| t.name == format!("ext.{}.weight", ext.len())) {
            ext.push(dense(&format!("ext.{}", ext.len()))?);
        }
        if ext.is_empty() {
            return Err(AresError::invalid_input("checkpoint has no extractor layers"));
        }
        for pair in ext.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(AresError::invalid_input("extractor layer shapes do not chain"));
            }
        }
        let cls = dense("cls")?;
        if cls.inputs != ext.last().unwrap().outputs {
            return Err(AresError::invalid_input("classifier input does not match feature dimension"));
        }
        let energy_free = find("energy.free")?.data.clone();
        if energy_free.len() != cls.outputs {
            return Err(AresError::invalid_input("energy weight count does not match class count"));
        }
        let head = find("head.params")?;
        if head.data.len() != 2 {
            return Err(AresError::invalid_input("head.params must hold 2 values"));
        }
        Ok(Self {
            ext,
            cls,
            energy_free,
            head: LogisticHead {
                weight: head.data[0],
                bias: head.data[1],
            },
            version: 0,
        })
    }
}

impl Checkpoint {
    pub fn new(net: &MlpNetwork, epochs_completed: usize, config_hash: Option<String>, log: Vec<EpochRecord>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            epochs_completed,
            config_hash,
            tensors: net.to_tensors(),
            log,
        }
    }

    pub fn network(&self) -> Result<MlpNetwork> {
        MlpNetwork::from_tensors(&self.tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)? + "\n";
        std::fs::write(path, text).map_err(|e| AresError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AresError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| AresError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(AresError::Parse {
                path: path.display().to_string(),
                message: format!("unsupported checkpoint format `{}`", ck.format),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkShape;
    use crate::numerics::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::new(12);
        let mut net = MlpNetwork::new(&NetworkShape::desk(3, 4), &mut rng).unwrap();
        net.energy_free = vec![0.1, -1e-300, 3.3e10, f64::MIN_POSITIVE];
        net.head.bias = -0.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::new(&net, 7, Some("abc".into()), Vec::new()).save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.epochs_completed, 7);
        let back = ck.network().unwrap();
        for (a, b) in net.params().zip(back.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.shape(), net.shape());
    }

    #[test]
    fn missing_tensor_is_reported() {
        let net = MlpNetwork::zeros(&NetworkShape::desk(2, 2));
        let mut t = net.to_tensors();
        t.retain(|t| t.name != "cls.bias");
        let err = MlpNetwork::from_tensors(&t).unwrap_err().to_string();
        assert!(err.contains("cls.bias"), "{err}");
    }
}
