// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use anyhow::Context as _;
use ares_core::divergence::{energy_histogram, write_histogram_csv};
use ares_core::evaluation::{
    ablation_csv, evaluate_oriented, reports_csv, run_ablation_suite, write_text, AblationGroup,
};
use ares_core::model::Checkpoint;
use ares_core::synthdata::DataBundle;
use ares_core::training::{final_virtual_outliers, score_orientation, train_with, TrainOptions};
use ares_core::AresError;

use crate::config::{Orientation, RunConfig};
use crate::manifest::{config_hash, RunManifest};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AresError::io(dir, e))?;
    Ok(())
}

/// Loads the datasets and checks that every configured OOD set has its file.
fn load_data(cfg: &RunConfig, dir: &Path) -> anyhow::Result<DataBundle> {
    if !dir.is_dir() {
        anyhow::bail!("data directory {} does not exist (run `ares gen` first)", dir.display());
    }
    for set in &cfg.data.ood {
        let path = dir.join(format!("ood_{}.csv", set.name));
        if !path.exists() {
            anyhow::bail!("missing OOD file {}", path.display());
        }
    }
    let bundle = DataBundle::load(dir)?;
    Ok(bundle)
}

pub fn gen(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let bundle = DataBundle::generate(&cfg.data, cfg.seed)?;
    for path in bundle.save(out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    config_path: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
    progress: bool,
) -> anyhow::Result<()> {
    let bundle = load_data(cfg, data_dir)?;
    ensure_dir(out)?;
    let hash = config_hash(cfg)?;
    let resume = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config_hash.as_deref() != Some(hash.as_str()) {
                eprintln!("warning: {} was written under a different config", path.display());
            }
            Some(ck)
        }
        None => None,
    };
    let artifacts = [CHECKPOINT_FILE, "train_log.csv", "timings.csv"];
    RunManifest::new("train", cfg, config_path, Some(data_dir), out, &artifacts)?.write(out)?;

    let opts = TrainOptions {
        progress,
        checkpoint_dir: Some(out.to_path_buf()),
        resume,
        gradcheck_every: None,
        stop_after,
    };
    let (net, log) = train_with(&cfg.train, &bundle, &opts)?;
    let done = log.records.last().map_or(0, |r| r.epoch + 1);
    Checkpoint::new(&net, done, Some(hash), log.records.clone()).save(&out.join(CHECKPOINT_FILE))?;
    log.write_csv(&out.join("train_log.csv"))?;
    log.write_timings_csv(&out.join("timings.csv"))?;
    println!("trained {done} epochs; outputs in {}", out.display());
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    config_path: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    checkpoint: &Path,
) -> anyhow::Result<()> {
    let bundle = load_data(cfg, data_dir)?;
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.network()?;
    if net.input_dim() != bundle.dim() || net.classes() != bundle.classes() {
        anyhow::bail!(
            "checkpoint {} expects dim={} with {} classes, data has dim={} with {} classes",
            checkpoint.display(),
            net.input_dim(),
            net.classes(),
            bundle.dim(),
            bundle.classes()
        );
    }
    ensure_dir(out)?;
    let artifacts = ["report.json", "report.csv", "energy_hist.csv"];
    RunManifest::new("eval", cfg, config_path, Some(data_dir), out, &artifacts)?.write(out)?;

    let orientation = match cfg.eval.orientation {
        Orientation::Trained => score_orientation(&net, &cfg.train, &bundle)?,
        Orientation::Literal => 1.0,
    };
    let mut report = evaluate_oriented(&net, &bundle, orientation)?;
    report.seed = cfg.seed;
    report.config = serde_json::to_value(&cfg.train)?;
    write_text(&out.join("report.json"), &report.to_json()?)?;
    write_text(&out.join("report.csv"), &reports_csv(std::slice::from_ref(&report)))?;

    let energies = |xs: &mut dyn Iterator<Item = &[f64]>| -> ares_core::Result<Vec<f64>> {
        xs.map(|x| net.energy_of(x)).collect()
    };
    let id = energies(&mut bundle.id_test.iter().map(|p| p.x.as_slice()))?;
    let ood = energies(&mut bundle.ood_eval.iter().flat_map(|(_, pts)| pts.iter().map(Vec::as_slice)))?;
    let virt: Vec<f64> = final_virtual_outliers(&net, &cfg.train, &bundle)
        .context("synthesizing virtual outliers for the histogram")?
        .points
        .iter()
        .map(|f| net.energy_of_feature(f))
        .collect::<ares_core::Result<_>>()?;
    write_histogram_csv(&out.join("energy_hist.csv"), &energy_histogram(&id, &ood, &virt)?)?;

    for s in &report.sets {
        println!("{}: fpr95={:.4} auroc={:.4}", s.name, s.fpr95, s.auroc);
    }
    println!(
        "average: fpr95={:.4} auroc={:.4} id_accuracy={:.4}",
        report.average.fpr95, report.average.auroc, report.id_accuracy
    );
    Ok(())
}

pub fn ablate(
    cfg: &RunConfig,
    config_path: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    only: Option<&str>,
    threads: usize,
) -> anyhow::Result<()> {
    let only = only.map(AblationGroup::parse).transpose()?;
    let bundle = load_data(cfg, data_dir)?;
    ensure_dir(out)?;
    let artifacts = ["ablation_report.csv", "ablation_report.json"];
    RunManifest::new("ablate", cfg, config_path, Some(data_dir), out, &artifacts)?.write(out)?;
    let reports = run_ablation_suite(&cfg.train, &bundle, only, threads)?;
    write_text(&out.join("ablation_report.csv"), &ablation_csv(&reports))?;
    write_text(&out.join("ablation_report.json"), &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    for r in &reports {
        match &r.error {
            None => println!("{}: fpr95={:.4} auroc={:.4}", r.variant, r.average.fpr95, r.average.auroc),
            Some(e) => println!("{}: failed: {e}", r.variant),
        }
    }
    Ok(())
}
