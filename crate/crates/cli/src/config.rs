// SPDX-License-Identifier: Apache-2.0

//! `key = value` run configuration with `[data] [escape] [train] [eval]`
//! sections, layered over a preset.

use std::path::Path;

use ares_core::model::LossKind;
use ares_core::synthdata::{DataConfig, IdGenerator, OodGenerator, OodSetSpec};
use ares_core::training::{BatchSource, EpsilonRule, ExpansionScope, StageMask, TrainConfig};
use ares_core::{AresError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(AresError::config("preset", format!("unknown preset `{other}` (expected paper, desk)"))),
        }
    }
}

/// Sign convention of the score at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Picked from training data after training.
    Trained,
    /// Raw energy, higher means inlier.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub orientation: Orientation,
}

/// Every resolved value of a run. The manifest hash covers all of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let train = match p {
            Preset::Paper => TrainConfig::paper(),
            Preset::Desk => TrainConfig::desk(),
        };
        Self {
            preset: p,
            seed: 0,
            data: DataConfig::default(),
            train,
            eval: EvalConfig {
                orientation: Orientation::Trained,
            },
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.ood.is_empty() {
            return Err(AresError::config("data.ood", "at least one OOD set is required"));
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section = String::new();
        let mut ood_params = OodParams::default();
        let mut ood_names: Option<Vec<String>> = None;
        let mut n_ood = None;
        let mut id_params = IdParams::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "data" | "escape" | "train" | "eval") {
                    return Err(AresError::config(
                        section.clone(),
                        format!("{origin}:{}: unknown section (expected data, escape, train, eval)", lineno + 1),
                    ));
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(AresError::Parse {
                    path: origin.to_string(),
                    message: format!("line {}: expected `key = value`", lineno + 1),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            if section.is_empty() && k == "seed" {
                self.set_seed(num(&key, v)?);
                continue;
            }
            let d = &mut self.data;
            let t = &mut self.train;
            match (section.as_str(), k) {
                ("data", "generator") => {
                    d.generator = IdGenerator::from_name(v).map_err(|_| {
                        AresError::config(&key, format!("unknown ID generator `{v}` (expected blobs, moons2d, rings)"))
                    })?
                }
                ("data", "n_train") => d.n_train = num(&key, v)?,
                ("data", "n_test") => d.n_test = num(&key, v)?,
                ("data", "classes") => d.classes = num(&key, v)?,
                ("data", "dim") => d.dim = num(&key, v)?,
                ("data", "aux_n") => d.aux_n = opt(&key, v)?,
                ("data", "ifs_maps") => d.ifs_maps = num(&key, v)?,
                ("data", "center_radius") => id_params.center_radius = Some(num(&key, v)?),
                ("data", "spread") => id_params.spread = Some(num(&key, v)?),
                ("data", "noise") => id_params.noise = Some(num(&key, v)?),
                ("data", "gap") => id_params.gap = Some(num(&key, v)?),
                ("data", "width") => id_params.width = Some(num(&key, v)?),
                ("data", "ood") => ood_names = Some(v.split(',').map(|s| s.trim().to_string()).collect()),
                ("data", "n_ood") => n_ood = Some(num(&key, v)?),
                ("data", "ring_inner") => ood_params.ring_inner = Some(num(&key, v)?),
                ("data", "ring_outer") => ood_params.ring_outer = Some(num(&key, v)?),
                ("data", "uniform_margin") => ood_params.uniform_margin = Some(num(&key, v)?),
                ("data", "shift_offset") => ood_params.shift_offset = Some(num(&key, v)?),
                ("escape", "alpha1") => t.escape.alpha1 = num(&key, v)?,
                ("escape", "max_iters") => t.escape.max_iters = num(&key, v)?,
                ("escape", "p_mix") => t.escape.p_mix = num(&key, v)?,
                ("train", "total_epochs") => t.total_epochs = num(&key, v)?,
                ("train", "pretrain_epochs") => t.pretrain_epochs = num(&key, v)?,
                ("train", "batch") => t.batch_size = num(&key, v)?,
                ("train", "lr_start") => t.lr_start = num(&key, v)?,
                ("train", "lr_end") => t.lr_end = num(&key, v)?,
                ("train", "beta") => t.beta = num(&key, v)?,
                ("train", "alpha2") => t.alpha2 = num(&key, v)?,
                ("train", "m_candidates") => t.m_candidates = num(&key, v)?,
                ("train", "t_rank") => t.t_rank = num(&key, v)?,
                ("train", "loss") => t.loss_kind = parse_loss(&key, v)?,
                ("train", "nce_temperature") => t.nce_temperature = num(&key, v)?,
                ("train", "stage_mask") => t.stage_mask = parse_mask(&key, v)?,
                ("train", "hidden") => t.hidden = list(&key, v)?,
                ("train", "feature_dim") => t.feature_dim = num(&key, v)?,
                ("train", "n_mix") => t.n_mix = opt(&key, v)?,
                ("train", "expansion_scope") => {
                    t.expansion_scope = match v {
                        "pool" => ExpansionScope::Pool,
                        "batch" => ExpansionScope::Batch,
                        _ => return Err(bad(&key, v, "pool, batch")),
                    }
                }
                ("train", "epsilon_rule") => {
                    t.epsilon_rule = match v {
                        "bottom-b" => EpsilonRule::BottomB,
                        "quantile" => EpsilonRule::Quantile,
                        _ => return Err(bad(&key, v, "bottom-b, quantile")),
                    }
                }
                ("train", "batch_source") => {
                    t.batch_source = match v {
                        "surrogate" => BatchSource::Surrogate,
                        "both" => BatchSource::Both,
                        _ => return Err(bad(&key, v, "surrogate, both")),
                    }
                }
                ("train", "reescape_each_epoch") => t.reescape_each_epoch = flag(&key, v)?,
                ("train", "rebuild_per_step") => t.rebuild_per_step = flag(&key, v)?,
                ("train", "attach_outliers") => t.attach_outliers = flag(&key, v)?,
                ("train", "vos_sampling") => t.vos_style_gaussian_sampling = flag(&key, v)?,
                ("train", "grad_clip") => t.grad_clip = opt(&key, v)?,
                ("eval", "orientation") => {
                    self.eval.orientation = match v {
                        "trained" => Orientation::Trained,
                        "literal" => Orientation::Literal,
                        _ => return Err(bad(&key, v, "trained, literal")),
                    }
                }
                _ => return Err(AresError::config(&key, format!("{origin}:{}: unknown key", lineno + 1))),
            }
        }
        id_params.apply(&mut self.data.generator)?;
        if let Some(names) = ood_names {
            let n = n_ood.or(self.data.ood.first().map(|s| s.n)).unwrap_or(self.data.n_test);
            self.data.ood = names
                .iter()
                .map(|name| {
                    let generator = OodGenerator::from_name(name).map_err(|_| {
                        AresError::config(
                            "data.ood",
                            format!("unknown OOD generator `{name}` (expected ring, uniform, shifted-blobs)"),
                        )
                    })?;
                    Ok(OodSetSpec {
                        name: name.clone(),
                        generator,
                        n,
                    })
                })
                .collect::<Result<_>>()?;
        } else if let Some(n) = n_ood {
            self.data.ood.iter_mut().for_each(|s| s.n = n);
        }
        for set in &mut self.data.ood {
            ood_params.apply(&mut set.generator);
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| AresError::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Canonical JSON of every resolved value.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Default)]
struct IdParams {
    center_radius: Option<f64>,
    spread: Option<f64>,
    noise: Option<f64>,
    gap: Option<f64>,
    width: Option<f64>,
}

impl IdParams {
    fn apply(&self, g: &mut IdGenerator) -> Result<()> {
        let name = g.name();
        let stray = |key: &str, set: bool| -> Result<()> {
            if set {
                return Err(AresError::config(
                    format!("data.{key}"),
                    format!("not a parameter of the `{name}` generator"),
                ));
            }
            Ok(())
        };
        match g {
            IdGenerator::Blobs {
                center_radius,
                spread,
                ..
            } => {
                stray("noise", self.noise.is_some())?;
                stray("gap", self.gap.is_some())?;
                stray("width", self.width.is_some())?;
                *center_radius = self.center_radius.unwrap_or(*center_radius);
                *spread = self.spread.unwrap_or(*spread);
            }
            IdGenerator::Moons2d { noise } => {
                stray("center_radius", self.center_radius.is_some())?;
                stray("spread", self.spread.is_some())?;
                stray("gap", self.gap.is_some())?;
                stray("width", self.width.is_some())?;
                *noise = self.noise.unwrap_or(*noise);
            }
            IdGenerator::Rings { gap, width } => {
                stray("center_radius", self.center_radius.is_some())?;
                stray("spread", self.spread.is_some())?;
                stray("noise", self.noise.is_some())?;
                *gap = self.gap.unwrap_or(*gap);
                *width = self.width.unwrap_or(*width);
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct OodParams {
    ring_inner: Option<f64>,
    ring_outer: Option<f64>,
    uniform_margin: Option<f64>,
    shift_offset: Option<f64>,
}

impl OodParams {
    fn apply(&self, g: &mut OodGenerator) {
        match g {
            OodGenerator::Ring { inner, outer } => {
                *inner = self.ring_inner.unwrap_or(*inner);
                *outer = self.ring_outer.unwrap_or(*outer);
            }
            OodGenerator::Uniform { margin } => *margin = self.uniform_margin.unwrap_or(*margin),
            OodGenerator::ShiftedBlobs { offset } => *offset = self.shift_offset.unwrap_or(*offset),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| AresError::config(key, format!("cannot parse `{v}`: {e}")))
}

fn opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v, "true, false")),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn bad(key: &str, v: &str, expected: &str) -> AresError {
    AresError::config(key, format!("unknown value `{v}` (expected {expected})"))
}

pub fn parse_loss(key: &str, v: &str) -> Result<LossKind> {
    LossKind::parse(v).ok_or_else(|| bad(key, v, "jsd, ce, nce"))
}

pub fn parse_mask(key: &str, v: &str) -> Result<StageMask> {
    StageMask::parse(v).map_err(|_| bad(key, v, "none, no-escape, no-expansion, no-estimation"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_defaults_carry_full_scale_values() {
        let c = RunConfig::preset(Preset::Paper);
        assert_eq!(c.train.escape.alpha1, 3.0);
        assert_eq!(c.train.alpha2, 2.0);
        assert_eq!(c.train.beta, 0.1);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.m_candidates, 10_000);
        assert_eq!(c.train.t_rank, 128);
        assert_eq!(c.train.lr_start, 0.1);
        assert_eq!(c.train.lr_end, 1e-6);
        assert_eq!((c.train.total_epochs, c.train.pretrain_epochs), (500, 200));
        let d = RunConfig::preset(Preset::Desk);
        assert_eq!((d.train.total_epochs, d.train.pretrain_epochs), (100, 40));
    }

    #[test]
    fn sections_and_keys() {
        let mut c = RunConfig::preset(Preset::Desk);
        let text = "seed = 7\n[data]\nn_train = 300 # small\nood = ring, uniform\nring_inner = 6\n[train]\nhidden = 32,32\ngrad_clip = none\nloss = nce\n[escape]\nalpha1 = 2.5\n";
        c.apply_text(text, "t").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.data.n_train, 300);
        assert_eq!(c.data.ood.len(), 2);
        assert_eq!(c.data.ood[0].generator, OodGenerator::Ring { inner: 6.0, outer: 9.0 });
        assert_eq!(c.train.hidden, vec![32, 32]);
        assert_eq!(c.train.grad_clip, None);
        assert_eq!(c.train.loss_kind, LossKind::Nce);
        assert_eq!(c.train.escape.alpha1, 2.5);
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            ("[data]\ngenerator = spirals\n", "data.generator"),
            ("[train]\nbogus = 1\n", "train.bogus"),
            ("[train]\nbeta = lots\n", "train.beta"),
            ("[model]\n", "model"),
            ("[data]\nood = ring, void\n", "data.ood"),
            ("[data]\nnoise = 0.2\n", "data.noise"),
        ];
        for (text, key) in cases {
            let err = RunConfig::preset(Preset::Desk).apply_text(text, "t").unwrap_err();
            assert!(err.to_string().contains(key), "{text:?} -> {err}");
        }
    }
}
