// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub seed: u64,
    pub stage_mask: String,
    pub loss: String,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Files the command writes, relative to `out_dir`.
    pub artifacts: Vec<String>,
    pub config: RunConfig,
}

pub fn config_hash(cfg: &RunConfig) -> anyhow::Result<String> {
    let digest = Sha256::digest(cfg.canonical_json()?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(
        command: &str,
        cfg: &RunConfig,
        config_path: Option<&Path>,
        data_dir: Option<&Path>,
        out_dir: &Path,
        artifacts: &[&str],
    ) -> anyhow::Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config_hash: config_hash(cfg)?,
            seed: cfg.seed,
            stage_mask: cfg.train.stage_mask.name().to_string(),
            loss: cfg.train.loss_kind.as_str().to_string(),
            data_dir: data_dir.map(Path::to_path_buf),
            out_dir: out_dir.to_path_buf(),
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            config: cfg.clone(),
        })
    }

    /// `manifest.json` for training runs, `<command>_manifest.json` otherwise,
    /// so evaluating into a training directory keeps the training manifest.
    pub fn file_name(&self) -> String {
        if self.command == "train" {
            MANIFEST_FILE.to_string()
        } else {
            format!("{}_{MANIFEST_FILE}", self.command)
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join(self.file_name());
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| ares_core::AresError::io(&path, e))?;
        Ok(path)
    }
}
