// SPDX-License-Identifier: Apache-2.0

//! `ares`: generate synthetic datasets, train with outlier synthesis,
//! evaluate FPR95/AUROC, and run the ablation matrix.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use ares_core::AresError;
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_loss, parse_mask, Preset, RunConfig};

/// Exit code for bad configuration or arguments.
const EXIT_CONFIG: u8 = 2;
/// Exit code when training diverged and was aborted.
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "ares", version, about = "Outlier synthesis for energy-based OOD detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Config file with [data] [escape] [train] [eval] sections.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed; overrides `seed` from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: `data` for gen, `out` otherwise).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset directory written by `ares gen`.
    #[arg(long, global = true, value_name = "DIR", default_value = "data")]
    data: PathBuf,
    /// Synthesis stage to disable: none, no-escape, no-expansion, no-estimation.
    #[arg(long, global = true, value_name = "MASK")]
    stage_mask: Option<String>,
    /// Discrimination loss: jsd, ce, nce.
    #[arg(long, global = true)]
    loss: Option<String>,
    /// Base profile the config file is layered on: paper, desk.
    #[arg(long, global = true, default_value = "paper")]
    preset: String,
    /// Suppress per-epoch progress lines.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write id_train.csv, id_test.csv, aux.csv, ood_<name>.csv and meta.json.
    Gen,
    /// Train and write checkpoint.json, train_log.csv, timings.csv and manifest.json.
    Train {
        /// Continue from this checkpoint; epoch numbering picks up after it.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Stop after this many epochs, leaving a resumable checkpoint.
        #[arg(long, value_name = "N")]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint: report.json, report.csv, energy_hist.csv.
    Eval {
        /// Checkpoint to evaluate (default: <out>/checkpoint.json).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant: ablation_report.csv.
    Ablate {
        /// Restrict to one group: stages, losses, epochs.
        #[arg(long, value_name = "GROUP")]
        only: Option<String>,
        /// Worker threads.
        #[arg(long, env = "ARES_THREADS")]
        threads: Option<usize>,
    },
}

fn resolve(common: &Common) -> ares_core::Result<RunConfig> {
    let mut cfg = RunConfig::preset(Preset::parse(&common.preset)?);
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(m) = &common.stage_mask {
        cfg.train.stage_mask = parse_mask("stage-mask", m)?;
    }
    if let Some(l) = &common.loss {
        cfg.train.loss_kind = parse_loss("loss", l)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli.common)?;
    let c = &cli.common;
    let out = |default: &str| c.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::Gen => commands::gen(&cfg, &out("data")),
        Command::Train { resume, stop_after } => commands::train(
            &cfg,
            c.config.as_deref(),
            &c.data,
            &out("out"),
            resume.as_deref(),
            stop_after,
            !c.quiet,
        ),
        Command::Eval { checkpoint } => {
            let dir = out("out");
            let ck = checkpoint.unwrap_or_else(|| dir.join(commands::CHECKPOINT_FILE));
            commands::eval(&cfg, c.config.as_deref(), &c.data, &dir, &ck)
        }
        Command::Ablate { only, threads } => {
            let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            commands::ablate(&cfg, c.config.as_deref(), &c.data, &out("out"), only.as_deref(), threads)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<AresError>() {
                Some(AresError::Config { .. }) => EXIT_CONFIG,
                Some(AresError::DivergenceAbort { .. }) => EXIT_DIVERGED,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
