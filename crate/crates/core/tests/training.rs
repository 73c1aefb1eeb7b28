// SPDX-License-Identifier: Apache-2.0

use ares_core::evaluation::evaluate_trained;
use ares_core::model::Checkpoint;
use ares_core::synthdata::{DataBundle, DataConfig};
use ares_core::training::{surrogate_set, train, train_with, StageMask, TrainConfig, TrainOptions};
use ares_core::AresError;

fn small_data() -> DataBundle {
    let cfg = DataConfig {
        n_train: 300,
        n_test: 150,
        ..DataConfig::default()
    };
    DataBundle::generate(&cfg, 0).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        total_epochs: 20,
        pretrain_epochs: 8,
        ..TrainConfig::desk()
    }
}

fn params(net: &ares_core::model::MlpNetwork) -> Vec<u64> {
    net.params().map(|p| p.to_bits()).collect()
}

#[test]
fn warmup_leaves_energy_weights_untouched() {
    let data = small_data();
    let cfg = small_cfg();
    let opts = TrainOptions {
        stop_after: Some(cfg.pretrain_epochs),
        ..TrainOptions::default()
    };
    let (net, log) = train_with(&cfg, &data, &opts).unwrap();
    assert_eq!(log.records.len(), cfg.pretrain_epochs);
    assert!(net.energy_weights().iter().all(|&w| w == 1.0));
    assert!(log.records.iter().all(|r| r.dis_loss == 0.0));
}

#[test]
fn log_shape_and_learning_rate_schedule() {
    let data = small_data();
    let cfg = small_cfg();
    let (_, log) = train(&cfg, &data).unwrap();
    let epochs: Vec<usize> = log.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, (0..cfg.total_epochs).collect::<Vec<_>>());
    assert!(log.records.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert!(log.records[cfg.pretrain_epochs..].iter().any(|r| r.dis_loss > 0.0));
}

#[test]
fn no_escape_surrogate_is_the_training_set() {
    let data = small_data();
    let cfg = TrainConfig {
        stage_mask: StageMask::parse("no-escape").unwrap(),
        ..small_cfg()
    };
    assert_eq!(surrogate_set(&cfg, &data, None).unwrap(), data.id_train);
    assert_ne!(surrogate_set(&small_cfg(), &data, None).unwrap(), data.id_train);
}

#[test]
fn same_seed_same_network_and_log() {
    let data = small_data();
    let (a, la) = train(&small_cfg(), &data).unwrap();
    let (b, lb) = train(&small_cfg(), &data).unwrap();
    assert_eq!(params(&a), params(&b));
    assert_eq!(la.records, lb.records);
    let other = TrainConfig {
        seed: 1,
        ..small_cfg()
    };
    assert_ne!(params(&a), params(&train(&other, &data).unwrap().0));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let data = small_data();
    let cfg = small_cfg();
    let (full, full_log) = train(&cfg, &data).unwrap();
    let half = TrainOptions {
        stop_after: Some(11),
        ..TrainOptions::default()
    };
    let (net, log) = train_with(&cfg, &data, &half).unwrap();
    let rest = TrainOptions {
        resume: Some(Checkpoint::new(&net, 11, None, log.records)),
        ..TrainOptions::default()
    };
    let (resumed, resumed_log) = train_with(&cfg, &data, &rest).unwrap();
    assert_eq!(params(&full), params(&resumed));
    assert_eq!(full_log.records, resumed_log.records);
}

#[test]
fn analytic_gradient_agrees_during_training() {
    let data = small_data();
    for loss in ["jsd", "ce", "nce"] {
        let cfg = TrainConfig {
            total_epochs: 12,
            pretrain_epochs: 4,
            loss_kind: ares_core::model::LossKind::parse(loss).unwrap(),
            ..small_cfg()
        };
        let opts = TrainOptions {
            gradcheck_every: Some(10),
            ..TrainOptions::default()
        };
        train_with(&cfg, &data, &opts).unwrap_or_else(|e| panic!("{loss}: {e}"));
    }
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lr_start: 1e4,
        grad_clip: None,
        ..small_cfg()
    };
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    match train_with(&cfg, &data, &opts) {
        Err(AresError::DivergenceAbort { checkpoint: Some(path), .. }) => {
            let ck = Checkpoint::load(&path).unwrap();
            assert!(ck.network().unwrap().params().all(|p| p.is_finite()));
        }
        other => panic!("expected a divergence abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn desk_run_classifies_in_distribution_data() {
    let data = DataBundle::generate(&DataConfig::default(), 0).unwrap();
    let cfg = TrainConfig::desk();
    let (net, log) = train(&cfg, &data).unwrap();
    let last = log.records.last().unwrap();
    assert!(last.id_accuracy >= 0.95, "id accuracy {}", last.id_accuracy);
    let report = evaluate_trained(&net, &cfg, &data).unwrap();
    assert!(report.id_accuracy >= 0.95);
    assert!(report.sets.iter().all(|s| s.auroc.is_finite()));
}
