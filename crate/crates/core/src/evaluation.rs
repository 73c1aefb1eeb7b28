// SPDX-License-Identifier: Apache-2.0

//! Thresholding at 95% ID acceptance, FPR95 and AUROC, run reports, and the
//! ablation matrix.
//!
//! Scores follow the "inlier iff `s·E ≥ γ`" convention, where `s = ±1` is
//! the score orientation. With `s = 1` higher energy means more
//! in-distribution; [`evaluate_trained`] picks `s` from training data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{AresError, Result};
use crate::model::{LossKind, MlpNetwork};
use crate::synthdata::DataBundle;
use crate::training::{score_orientation, train, StageMask, StageTimings, TrainConfig};

/// Fewest ID scores for which a 95% acceptance threshold is defined.
pub const MIN_GAMMA_SCORES: usize = 20;

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(AresError::invalid_input(format!("{name} scores are empty")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(AresError::invalid_input(format!("{name} scores contain {bad}")));
    }
    Ok(())
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// The largest score value `γ` with at least 95% of ID scores `≥ γ`.
pub fn choose_gamma(id_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    let n = id_scores.len();
    if n < MIN_GAMMA_SCORES {
        return Err(AresError::invalid_input(format!(
            "need at least {MIN_GAMMA_SCORES} ID scores to set a 95% threshold, got {n}"
        )));
    }
    let s = sorted(id_scores);
    let mut gamma = s[0];
    let mut i = 0;
    while i < n {
        // Integer form of (n − i)/n ≥ 0.95.
        if 20 * (n - i) >= 19 * n {
            gamma = s[i];
        } else {
            break;
        }
        let v = s[i];
        while i < n && s[i] == v {
            i += 1;
        }
    }
    Ok(gamma)
}

/// 1 (inlier) iff `score ≥ gamma`.
pub fn discriminate(score: f64, gamma: f64) -> u8 {
    u8::from(score >= gamma)
}

/// Fraction of OOD scores accepted at the 95%-TPR threshold of the ID scores.
pub fn fpr95(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("OOD", ood_scores)?;
    let gamma = choose_gamma(id_scores)?;
    fpr_at(gamma, ood_scores)
}

pub fn fpr_at(gamma: f64, ood_scores: &[f64]) -> Result<f64> {
    check_scores("OOD", ood_scores)?;
    let accepted = ood_scores.iter().filter(|&&s| discriminate(s, gamma) == 1).count();
    Ok(accepted as f64 / ood_scores.len() as f64)
}

/// `P(E_id > E_ood) + ½·P(E_id = E_ood)` over all pairs, via sorting.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let ood = sorted(ood_scores);
    // Twice the Mann–Whitney count, kept integral.
    let mut twice: u128 = 0;
    for &s in id_scores {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2 * id_scores.len() as u128 * ood.len() as u128) as f64)
}

/// Energy scores of the ID test set and every OOD evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<(String, Vec<f64>)>,
}

impl ScoreSet {
    pub fn compute(net: &MlpNetwork, bundle: &DataBundle) -> Result<Self> {
        let score = |xs: &mut dyn Iterator<Item = &[f64]>| -> Result<Vec<f64>> { xs.map(|x| net.energy_of(x)).collect() };
        if net.input_dim() != bundle.dim() {
            return Err(AresError::invalid_input(format!(
                "network expects dimension {}, data has dimension {}",
                net.input_dim(),
                bundle.dim()
            )));
        }
        let id_scores = score(&mut bundle.id_test.iter().map(|p| p.x.as_slice()))?;
        let ood_scores = bundle
            .ood_eval
            .iter()
            .map(|(name, pts)| Ok((name.clone(), score(&mut pts.iter().map(Vec::as_slice))?)))
            .collect::<Result<_>>()?;
        Ok(Self { id_scores, ood_scores })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub name: String,
    pub fpr95: f64,
    pub auroc: f64,
    /// AUROC of the raw energy, ignoring the orientation.
    pub auroc_literal: f64,
    /// `max(auroc, 1 − auroc)`: the AUROC under whichever score orientation is better.
    pub auroc_oriented: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub gamma: f64,
    /// Sign applied to the energy before thresholding.
    pub orientation: f64,
    pub id_accuracy: f64,
    pub sets: Vec<SetMetrics>,
    /// Arithmetic mean over `sets`.
    pub average: SetMetrics,
    pub config: serde_json::Value,
    /// Set when the variant failed; metrics are then NaN.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Mean wall time per joint epoch, plus total training time in `total_s`.
    /// Not serialized, so report files stay byte-stable across runs.
    #[serde(skip)]
    pub timings: Option<StageTimings>,
    #[serde(skip)]
    pub train_seconds: f64,
}

impl RunReport {
    /// Metrics of `orientation · E` for every OOD set. `orientation` must be ±1.
    pub fn from_scores(
        variant: &str,
        seed: u64,
        scores: &ScoreSet,
        id_accuracy: f64,
        orientation: f64,
    ) -> Result<Self> {
        if scores.ood_scores.is_empty() {
            return Err(AresError::invalid_input("report needs at least one OOD set"));
        }
        if orientation != 1.0 && orientation != -1.0 {
            return Err(AresError::invalid_input(format!("orientation must be +1 or -1, got {orientation}")));
        }
        let flip = |xs: &[f64]| xs.iter().map(|x| orientation * x).collect::<Vec<f64>>();
        let id = flip(&scores.id_scores);
        let gamma = choose_gamma(&id)?;
        let mut sets = Vec::with_capacity(scores.ood_scores.len());
        for (name, raw) in &scores.ood_scores {
            let a = auroc(&id, &flip(raw))?;
            let literal = if orientation > 0.0 { a } else { auroc(&scores.id_scores, raw)? };
            sets.push(SetMetrics {
                name: name.clone(),
                fpr95: fpr_at(gamma, &flip(raw))?,
                auroc: a,
                auroc_literal: literal,
                auroc_oriented: a.max(1.0 - a),
            });
        }
        let k = sets.len() as f64;
        let mean = |f: fn(&SetMetrics) -> f64| sets.iter().map(f).sum::<f64>() / k;
        let average = SetMetrics {
            name: "average".into(),
            fpr95: mean(|s| s.fpr95),
            auroc: mean(|s| s.auroc),
            auroc_literal: mean(|s| s.auroc_literal),
            auroc_oriented: mean(|s| s.auroc_oriented),
        };
        Ok(Self {
            variant: variant.into(),
            seed,
            gamma,
            orientation,
            id_accuracy,
            sets,
            average,
            config: serde_json::Value::Null,
            error: None,
            timings: None,
            train_seconds: 0.0,
        })
    }

    fn failed(variant: &str, seed: u64, config: serde_json::Value, err: &AresError, names: &[String]) -> Self {
        let nan = |name: &str| SetMetrics {
            name: name.into(),
            fpr95: f64::NAN,
            auroc: f64::NAN,
            auroc_literal: f64::NAN,
            auroc_oriented: f64::NAN,
        };
        Self {
            variant: variant.into(),
            seed,
            gamma: f64::NAN,
            orientation: f64::NAN,
            id_accuracy: f64::NAN,
            sets: names.iter().map(|n| nan(n)).collect(),
            average: nan("average"),
            config,
            error: Some(err.to_string()),
            timings: None,
            train_seconds: 0.0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// ID test accuracy plus metrics on every OOD set, scoring with the raw
/// energy (orientation `+1`).
pub fn evaluate(net: &MlpNetwork, bundle: &DataBundle) -> Result<RunReport> {
    evaluate_oriented(net, bundle, 1.0)
}

pub fn evaluate_oriented(net: &MlpNetwork, bundle: &DataBundle, orientation: f64) -> Result<RunReport> {
    let scores = ScoreSet::compute(net, bundle)?;
    let mut hit = 0usize;
    for p in &bundle.id_test {
        hit += usize::from(net.predict(&p.x)? == p.y);
    }
    let acc = hit as f64 / bundle.id_test.len().max(1) as f64;
    RunReport::from_scores("eval", bundle.meta.seed, &scores, acc, orientation)
}

/// As [`evaluate`], with the orientation taken from [`score_orientation`].
/// Only the training split and the auxiliary set inform the sign.
pub fn evaluate_trained(net: &MlpNetwork, cfg: &TrainConfig, bundle: &DataBundle) -> Result<RunReport> {
    let s = score_orientation(net, cfg, bundle)?;
    let mut report = evaluate_oriented(net, bundle, s)?;
    report.seed = cfg.seed;
    report.config = serde_json::to_value(cfg)?;
    Ok(report)
}

fn metric_header(names: &[String]) -> String {
    let mut h = String::new();
    for n in names {
        let _ = write!(h, ",{n}_fpr95,{n}_auroc");
    }
    h.push_str(",average_fpr95,average_auroc,average_auroc_literal,average_auroc_oriented,orientation,id_accuracy");
    h
}

fn metric_row(r: &RunReport) -> String {
    let mut row = String::new();
    for s in &r.sets {
        let _ = write!(row, ",{:.6},{:.6}", s.fpr95, s.auroc);
    }
    let _ = write!(
        row,
        ",{:.6},{:.6},{:.6},{:.6},{},{:.6}",
        r.average.fpr95,
        r.average.auroc,
        r.average.auroc_literal,
        r.average.auroc_oriented,
        r.orientation,
        r.id_accuracy
    );
    row
}

/// One row per report; columns are per-set FPR95/AUROC followed by averages.
pub fn reports_csv(reports: &[RunReport]) -> String {
    let names: Vec<String> = reports
        .first()
        .map(|r| r.sets.iter().map(|s| s.name.clone()).collect())
        .unwrap_or_default();
    let mut out = format!("variant{}\n", metric_header(&names));
    for r in reports {
        let _ = writeln!(out, "{}{}", r.variant, metric_row(r));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| AresError::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationGroup {
    Stages,
    Losses,
    Epochs,
}

impl AblationGroup {
    pub const ALL: [AblationGroup; 3] = [AblationGroup::Stages, AblationGroup::Losses, AblationGroup::Epochs];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stages" => Ok(Self::Stages),
            "losses" => Ok(Self::Losses),
            "epochs" => Ok(Self::Epochs),
            other => Err(AresError::config(
                "only",
                format!("unknown ablation group `{other}` (expected stages, losses, epochs)"),
            )),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stages => "stages",
            Self::Losses => "losses",
            Self::Epochs => "epochs",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub group: AblationGroup,
    pub name: String,
    pub cfg: TrainConfig,
}

/// Stage masks (full plus each stage removed), the three losses, and two
/// epoch budgets (the base and twice the base, warmup scaled alike).
pub fn ablation_matrix(base: &TrainConfig, only: Option<AblationGroup>) -> Vec<AblationVariant> {
    let mut out = Vec::new();
    let want = |g| only.is_none_or(|o| o == g);
    if want(AblationGroup::Stages) {
        for mask in ["none", "no-escape", "no-expansion", "no-estimation"] {
            let cfg = TrainConfig {
                stage_mask: StageMask::parse(mask).expect("known mask"),
                ..base.clone()
            };
            let name = if mask == "none" { "full".to_string() } else { mask.to_string() };
            out.push(AblationVariant {
                group: AblationGroup::Stages,
                name,
                cfg,
            });
        }
    }
    if want(AblationGroup::Losses) {
        for kind in [LossKind::Jsd, LossKind::Ce, LossKind::Nce] {
            out.push(AblationVariant {
                group: AblationGroup::Losses,
                name: format!("loss-{}", kind.as_str()),
                cfg: TrainConfig {
                    loss_kind: kind,
                    ..base.clone()
                },
            });
        }
    }
    if want(AblationGroup::Epochs) {
        for factor in [1, 2] {
            let cfg = TrainConfig {
                total_epochs: base.total_epochs * factor,
                pretrain_epochs: base.pretrain_epochs * factor,
                ..base.clone()
            };
            out.push(AblationVariant {
                group: AblationGroup::Epochs,
                name: format!("epochs-{}", cfg.total_epochs),
                cfg,
            });
        }
    }
    out
}

fn run_variant(cfg: &TrainConfig, bundle: &DataBundle) -> Result<RunReport> {
    let t = Instant::now();
    let (net, log) = train(cfg, bundle)?;
    let train_seconds = t.elapsed().as_secs_f64();
    let mut report = evaluate_trained(&net, cfg, bundle)?;
    report.timings = Some(log.mean_timings(cfg.pretrain_epochs));
    report.train_seconds = train_seconds;
    Ok(report)
}

/// Trains and evaluates every variant of the matrix on the same data and
/// seed. Identical configurations are trained once. A failing variant yields
/// a report carrying its error; the others still run.
pub fn run_ablation_suite(
    base: &TrainConfig,
    bundle: &DataBundle,
    only: Option<AblationGroup>,
    threads: usize,
) -> Result<Vec<RunReport>> {
    base.validate()?;
    let variants = ablation_matrix(base, only);
    let mut unique: BTreeMap<String, usize> = BTreeMap::new();
    let mut jobs: Vec<&TrainConfig> = Vec::new();
    let keys: Vec<String> = variants
        .iter()
        .map(|v| serde_json::to_string(&v.cfg).map_err(AresError::from))
        .collect::<Result<_>>()?;
    for (v, key) in variants.iter().zip(&keys) {
        unique.entry(key.clone()).or_insert_with(|| {
            jobs.push(&v.cfg);
            jobs.len() - 1
        });
    }

    let results: Vec<Mutex<Option<Result<RunReport>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                if j >= jobs.len() {
                    break;
                }
                let r = run_variant(jobs[j], bundle);
                *results[j].lock().expect("result slot") = Some(r);
            });
        }
    });
    let results: Vec<Result<RunReport>> = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every job ran"))
        .collect();

    let names: Vec<String> = bundle.ood_eval.iter().map(|(n, _)| n.clone()).collect();
    let mut out = Vec::with_capacity(variants.len());
    for (v, key) in variants.iter().zip(&keys) {
        let config = serde_json::to_value(&v.cfg)?;
        let label = format!("{}/{}", v.group.as_str(), v.name);
        let report = match &results[unique[key]] {
            Ok(r) => RunReport {
                variant: label,
                config,
                ..r.clone()
            },
            Err(e) => RunReport::failed(&label, v.cfg.seed, config, e, &names),
        };
        out.push(report);
    }
    Ok(out)
}

pub const ABLATION_TIMING_COLUMNS: &str = "escape_s,expansion_s,estimation_s,divergence_s,epoch_s,train_s";

/// Ablation table: metric columns as in [`reports_csv`] plus group, seed,
/// error, and per-stage mean wall time per joint epoch.
pub fn ablation_csv(reports: &[RunReport]) -> String {
    let names: Vec<String> = reports
        .first()
        .map(|r| r.sets.iter().map(|s| s.name.clone()).collect())
        .unwrap_or_default();
    let mut out = format!("variant,seed{},{ABLATION_TIMING_COLUMNS},error\n", metric_header(&names));
    for r in reports {
        let t = r.timings.clone().unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(
            out,
            "{},{}{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.variant,
            r.seed,
            metric_row(r),
            t.escape_s,
            t.expansion_s,
            t.estimation_s,
            t.divergence_s,
            t.total_s,
            r.train_seconds,
            err
        );
    }
    out
}
