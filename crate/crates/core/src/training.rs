// SPDX-License-Identifier: Apache-2.0

//! The training loop: Escape once up front, a classification-only warmup, then
//! joint epochs that rebuild the expanded set, pick bottom-density virtual
//! outliers per batch, and minimize the composite loss with plain SGD on a
//! cosine schedule.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{AresError, Result};
use crate::escape::{escape_dataset, EscapeConfig};
use crate::divergence::LossBreakdown;
use crate::model::gradcheck::check_gradients;
use crate::model::{
    loss_and_backward, predict_class, sgd_step, BatchForward, Checkpoint, GradientTape, LossKind, LossSpec,
    MlpNetwork, NetworkShape, VirtualSource,
};
use crate::numerics::{GaussianModel, Rng};
use crate::synthdata::{DataBundle, LabeledVector};
use crate::synthesis::{
    bottom_virtual_outliers, estimate_outlier_region, expand_features, gaussian_candidates, random_virtual_outliers,
    sample_virtual_outliers, select_epsilon, ExpandedSet, OutlierBatch,
};

/// Which of the synthesis stages run. A disabled stage is replaced by its
/// ablation stand-in rather than removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMask {
    /// Off: the surrogate set is the clean training set.
    pub escape: bool,
    /// Off: the candidate pool is the unmixed surrogate features.
    pub expansion: bool,
    /// Off: virtual outliers are a uniform random choice from the pool.
    pub estimation: bool,
}

impl Default for StageMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl StageMask {
    pub const ALL: StageMask = StageMask {
        escape: true,
        expansion: true,
        estimation: true,
    };

    pub fn parse(s: &str) -> Result<Self> {
        let mut m = Self::ALL;
        match s {
            "none" | "all" => {}
            "no-escape" => m.escape = false,
            "no-expansion" => m.expansion = false,
            "no-estimation" => m.estimation = false,
            other => {
                return Err(AresError::config(
                    "stage_mask",
                    format!("unknown mask `{other}` (expected none, no-escape, no-expansion, no-estimation)"),
                ))
            }
        }
        Ok(m)
    }

    pub fn name(&self) -> &'static str {
        match (self.escape, self.expansion, self.estimation) {
            (true, true, true) => "none",
            (false, true, true) => "no-escape",
            (true, false, true) => "no-expansion",
            (true, true, false) => "no-estimation",
            _ => "custom",
        }
    }
}

/// Where the expansion stage draws its mixing partners from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionScope {
    /// All surrogate features, extracted at the start of the epoch (or step).
    Pool,
    /// Only the current batch.
    Batch,
}

/// How `ε` is set for each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonRule {
    /// Just above the `B`-th lowest candidate log-density; the batch is the bottom `B`.
    BottomB,
    /// The `t`-th lowest of `M` sampled candidates, fixed for the epoch.
    Quantile,
}

/// Which instances feed the classification term (and the inlier side of
/// the discrimination term).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSource {
    /// Surrogate instances only.
    Surrogate,
    /// Each clean instance together with its surrogate.
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta: f64,
    pub escape: EscapeConfig,
    pub alpha2: f64,
    pub m_candidates: usize,
    pub t_rank: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub nce_temperature: f64,
    pub stage_mask: StageMask,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Mixed points per rebuild; `None` means one per surrogate instance.
    pub n_mix: Option<usize>,
    pub expansion_scope: ExpansionScope,
    pub epsilon_rule: EpsilonRule,
    pub batch_source: BatchSource,
    pub reescape_each_epoch: bool,
    pub rebuild_per_step: bool,
    /// Recompute each selected virtual outlier as the mixture of its sources'
    /// current features, so the discrimination gradient reaches the extractor
    /// through the outliers too. Off: outliers are constants of the step. The
    /// Gaussian fit and `ε` are constants either way.
    pub attach_outliers: bool,
    /// Candidates drawn from the fitted Gaussian instead of the expanded set.
    pub vos_style_gaussian_sampling: bool,
    /// Upper bound on the global gradient norm of each step; `None` disables.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn paper() -> Self {
        Self {
            total_epochs: 500,
            pretrain_epochs: 200,
            batch_size: 128,
            lr_start: 0.1,
            lr_end: 1e-6,
            beta: 0.1,
            escape: EscapeConfig::default(),
            alpha2: 2.0,
            m_candidates: 10_000,
            t_rank: 128,
            seed: 0,
            loss_kind: LossKind::Jsd,
            nce_temperature: 0.1,
            stage_mask: StageMask::ALL,
            hidden: vec![64, 64],
            feature_dim: 16,
            n_mix: None,
            expansion_scope: ExpansionScope::Pool,
            epsilon_rule: EpsilonRule::BottomB,
            batch_source: BatchSource::Surrogate,
            reescape_each_epoch: false,
            rebuild_per_step: false,
            attach_outliers: true,
            vos_style_gaussian_sampling: false,
            grad_clip: Some(50.0),
        }
    }

    /// 100 total / 40 warmup epochs; everything else as [`TrainConfig::paper`].
    pub fn desk() -> Self {
        Self {
            total_epochs: 100,
            pretrain_epochs: 40,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.pretrain_epochs >= self.total_epochs {
            return Err(AresError::config(
                "pretrain_epochs",
                format!(
                    "must be < total_epochs ({} vs {})",
                    self.pretrain_epochs, self.total_epochs
                ),
            ));
        }
        if self.batch_size < 2 {
            return Err(AresError::config("batch", format!("must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(AresError::config(
                "lr_start",
                format!("need lr_start >= lr_end > 0, got {} and {}", self.lr_start, self.lr_end),
            ));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(AresError::config("beta", format!("must be >= 0, got {}", self.beta)));
        }
        if !self.alpha2.is_finite() || self.alpha2 <= 0.0 {
            return Err(AresError::config("alpha2", format!("must be > 0, got {}", self.alpha2)));
        }
        if self.m_candidates == 0 {
            return Err(AresError::config("m_candidates", "must be >= 1"));
        }
        if self.t_rank == 0 || self.t_rank > self.m_candidates {
            return Err(AresError::config(
                "t_rank",
                format!("must be in 1..=m_candidates ({}), got {}", self.m_candidates, self.t_rank),
            ));
        }
        if !(self.nce_temperature > 0.0) {
            return Err(AresError::config(
                "nce_temperature",
                format!("must be > 0, got {}", self.nce_temperature),
            ));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(AresError::config("hidden", "layer widths must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(AresError::config("grad_clip", format!("must be > 0, got {c}")));
            }
        }
        if self.n_mix == Some(0) {
            return Err(AresError::config("n_mix", "must be >= 1"));
        }
        self.escape.validate()
    }

    pub fn shape(&self, input: usize, classes: usize) -> NetworkShape {
        NetworkShape {
            input,
            hidden: self.hidden.clone(),
            feature: self.feature_dim,
            classes,
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            kind: self.loss_kind,
            beta: self.beta,
            nce_temperature: self.nce_temperature,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(AresError::invalid_param(format!(
            "step {step} outside 0..={total_steps}"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + phase.cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub cls_loss: f64,
    /// Zero during warmup.
    pub dis_loss: f64,
    pub total_loss: f64,
    /// Accuracy on the batches the classifier was trained on.
    pub train_accuracy: f64,
    /// Accuracy on the clean training set after the epoch.
    pub id_accuracy: f64,
}

/// Wall-clock seconds per stage for one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub epoch: usize,
    pub escape_s: f64,
    pub expansion_s: f64,
    pub estimation_s: f64,
    pub divergence_s: f64,
    pub total_s: f64,
}

impl StageTimings {
    pub fn add(&mut self, other: &StageTimings) {
        self.escape_s += other.escape_s;
        self.expansion_s += other.expansion_s;
        self.estimation_s += other.estimation_s;
        self.divergence_s += other.divergence_s;
        self.total_s += other.total_s;
    }
}

/// Per-epoch records. Timings live apart from the records so that the
/// records of two runs with the same seed compare equal.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub timings: Vec<StageTimings>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,cls_loss,dis_loss,total_loss,train_accuracy,id_accuracy";
pub const TIMINGS_HEADER: &str = "epoch,escape_s,expansion_s,estimation_s,divergence_s,total_s";

impl TrainLog {
    pub fn records_csv(&self) -> String {
        let mut out = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.lr, r.cls_loss, r.dis_loss, r.total_loss, r.train_accuracy, r.id_accuracy
            );
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = format!("{TIMINGS_HEADER}\n");
        for t in &self.timings {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                t.epoch, t.escape_s, t.expansion_s, t.estimation_s, t.divergence_s, t.total_s
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.records_csv()).map_err(|e| AresError::io(path, e))
    }

    pub fn write_timings_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.timings_csv()).map_err(|e| AresError::io(path, e))
    }

    /// Mean per-epoch stage timings over the joint epochs (all epochs if none).
    /// Escape runs once up front by default, so its time is spread over those epochs.
    pub fn mean_timings(&self, pretrain_epochs: usize) -> StageTimings {
        let joint: Vec<&StageTimings> = self.timings.iter().filter(|t| t.epoch >= pretrain_epochs).collect();
        let pool: Vec<&StageTimings> = if joint.is_empty() { self.timings.iter().collect() } else { joint };
        let mut sum = StageTimings::default();
        pool.iter().for_each(|t| sum.add(t));
        let n = pool.len().max(1) as f64;
        let escape: f64 = self.timings.iter().map(|t| t.escape_s).sum();
        StageTimings {
            epoch: 0,
            escape_s: escape / n,
            expansion_s: sum.expansion_s / n,
            estimation_s: sum.estimation_s / n,
            divergence_s: sum.divergence_s / n,
            total_s: sum.total_s / n,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Print one `epoch=… cls=… dis=… lr=…` line per epoch to stdout.
    pub progress: bool,
    /// Where `last_good.json` is written on a divergence abort.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from a saved state; epoch numbering resumes after it.
    pub resume: Option<Checkpoint>,
    /// Compare the analytic gradient with central differences every this
    /// many steps; a mismatch aborts training with a contract error.
    pub gradcheck_every: Option<usize>,
    /// Return after this many completed epochs (counted from epoch 0), as if
    /// interrupted. Resuming from a checkpoint of that state reproduces the
    /// uninterrupted run.
    pub stop_after: Option<usize>,
}

/// Relative-error bound of the in-training gradient check.
pub const GRADCHECK_TOL: f64 = 1e-3;
/// Parameters probed per in-training gradient check.
pub const GRADCHECK_PARAMS: usize = 24;

/// Virtual outliers of one step, in the form the loss needs them.
enum StepVirtual<'a> {
    None,
    Detached(Vec<Vec<f64>>),
    /// Mixtures of batch members.
    Batch(Vec<(usize, usize, f64)>),
    /// Mixtures of the listed surrogate inputs, forwarded separately.
    Sources {
        inputs: Vec<&'a [f64]>,
        pairs: Vec<(usize, usize, f64)>,
    },
}

fn step_loss(
    net: &MlpNetwork,
    cache: &BatchForward,
    labels: &[usize],
    virt: &StepVirtual<'_>,
    spec: &LossSpec,
    tape: Option<&mut GradientTape>,
) -> Result<LossBreakdown> {
    match virt {
        StepVirtual::None => loss_and_backward(net, cache, labels, None, spec, tape),
        StepVirtual::Detached(points) => {
            loss_and_backward(net, cache, labels, Some(VirtualSource::Detached(points)), spec, tape)
        }
        StepVirtual::Batch(pairs) => {
            let v = VirtualSource::Attached { cache, pairs };
            loss_and_backward(net, cache, labels, Some(v), spec, tape)
        }
        StepVirtual::Sources { inputs, pairs } => {
            let src = net.forward_batch(inputs)?;
            let v = VirtualSource::Attached { cache: &src, pairs };
            loss_and_backward(net, cache, labels, Some(v), spec, tape)
        }
    }
}

/// Central differences (h = 1e-5) on an evenly spaced subset of parameters
/// against the step's analytic gradient, before clipping.
fn verify_step_gradient(
    net: &MlpNetwork,
    tape: &GradientTape,
    inputs: &[&[f64]],
    labels: &[usize],
    virt: &StepVirtual<'_>,
    spec: &LossSpec,
    step: usize,
) -> Result<()> {
    let analytic: Vec<f64> = tape.values().copied().collect();
    let n = analytic.len();
    let stride = n.div_ceil(GRADCHECK_PARAMS).max(1);
    let idx: Vec<usize> = (step % stride..n).step_by(stride).collect();
    let report = check_gradients(net, &analytic, Some(&idx), 1e-5, 1e-6, |probe| {
        let cache = probe.forward_batch(inputs)?;
        Ok(step_loss(probe, &cache, labels, virt, spec, None)?.total)
    })?;
    if report.max_rel_error > GRADCHECK_TOL {
        return Err(AresError::Contract(format!(
            "gradient check failed at step {step}: relative error {:.3e} at parameter {}",
            report.max_rel_error, report.worst_index
        )));
    }
    Ok(())
}

/// Named child streams of the run seed.
struct Streams {
    root: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self { root: Rng::new(seed) }
    }

    fn init(&self) -> Rng {
        self.root.child("init")
    }

    fn escape(&self, epoch: Option<usize>) -> Rng {
        match epoch {
            None => self.root.child("escape"),
            Some(e) => self.root.child_indexed("escape", e as u64 + 1),
        }
    }

    fn shuffle(&self, epoch: usize) -> Rng {
        self.root.child_indexed("epoch-shuffle", epoch as u64)
    }

    fn expansion(&self, epoch: usize) -> Rng {
        self.root.child_indexed("expansion", epoch as u64)
    }

    fn epsilon(&self, epoch: usize) -> Rng {
        self.root.child_indexed("epsilon-sample", epoch as u64)
    }
}

/// The surrogate set for the run (or for `epoch` when re-escaping).
pub fn surrogate_set(cfg: &TrainConfig, data: &DataBundle, epoch: Option<usize>) -> Result<Vec<LabeledVector>> {
    if !cfg.stage_mask.escape {
        return Ok(data.id_train.clone());
    }
    escape_dataset(&data.id_train, &data.aux, &cfg.escape, &Streams::new(cfg.seed).escape(epoch))
}

fn features_of(net: &MlpNetwork, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    xs.iter().map(|x| net.forward_features(x)).collect()
}

/// Candidate pool plus its Gaussian, rebuilt from the current extractor.
struct Region {
    pool: ExpandedSet,
    model: GaussianModel,
    /// Fixed threshold under [`EpsilonRule::Quantile`].
    epsilon: Option<f64>,
}

fn build_region(
    cfg: &TrainConfig,
    feats: &[Vec<f64>],
    expansion_rng: &mut Rng,
    epsilon_rng: &mut Rng,
    timing: &mut StageTimings,
) -> Result<Region> {
    let t0 = Instant::now();
    let pool = if cfg.stage_mask.expansion {
        let n_mix = cfg.n_mix.unwrap_or(feats.len());
        expand_features(feats, cfg.alpha2, n_mix, expansion_rng)?
    } else {
        ExpandedSet::identity(feats)
    };
    timing.expansion_s += t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let model = estimate_outlier_region(&pool)?;
    let pool = if cfg.vos_style_gaussian_sampling {
        gaussian_candidates(&model, cfg.m_candidates.max(pool.len()), expansion_rng)
    } else {
        pool
    };
    let epsilon = match cfg.epsilon_rule {
        EpsilonRule::Quantile if cfg.stage_mask.estimation => {
            Some(select_epsilon(&pool, &model, cfg.m_candidates, cfg.t_rank, epsilon_rng)?)
        }
        _ => None,
    };
    timing.estimation_s += t1.elapsed().as_secs_f64();
    Ok(Region { pool, model, epsilon })
}

fn pick_outliers(
    cfg: &TrainConfig,
    region: &Region,
    count: usize,
    rng: &mut Rng,
) -> Result<(ExpandedSet, OutlierBatch)> {
    let pool = &region.pool;
    let m = cfg.m_candidates.min(pool.len());
    let idx = if m < pool.len() {
        let mut idx = rng.sample_indices(pool.len(), m);
        idx.sort_unstable();
        idx
    } else {
        (0..pool.len()).collect()
    };
    let sub = ExpandedSet {
        points: idx.iter().map(|&i| pool.points[i].clone()).collect(),
        source_pairs: if pool.source_pairs.is_empty() {
            Vec::new()
        } else {
            idx.iter().map(|&i| pool.source_pairs[i]).collect()
        },
    };
    let batch = if !cfg.stage_mask.estimation {
        random_virtual_outliers(&sub, &region.model, count, rng)?
    } else if let Some(eps) = region.epsilon {
        sample_virtual_outliers(&sub, &region.model, eps, count)?
    } else {
        bottom_virtual_outliers(&sub, &region.model, count)?
    };
    Ok((sub, batch))
}

fn accuracy(net: &MlpNetwork, data: &[LabeledVector]) -> Result<f64> {
    let mut hit = 0usize;
    for p in data {
        hit += usize::from(net.predict(&p.x)? == p.y);
    }
    Ok(hit as f64 / data.len().max(1) as f64)
}

fn abort(
    net_state: &Checkpoint,
    opts: &TrainOptions,
    epoch: usize,
    step: usize,
) -> AresError {
    let checkpoint = opts.checkpoint_dir.as_ref().and_then(|dir| {
        let path = dir.join("last_good.json");
        net_state.save(&path).ok().map(|_| path)
    });
    AresError::DivergenceAbort { epoch, step, checkpoint }
}

pub fn train(cfg: &TrainConfig, data: &DataBundle) -> Result<(MlpNetwork, TrainLog)> {
    train_with(cfg, data, &TrainOptions::default())
}

pub fn train_with(cfg: &TrainConfig, data: &DataBundle, opts: &TrainOptions) -> Result<(MlpNetwork, TrainLog)> {
    cfg.validate()?;
    let n = data.id_train.len();
    if n < 2 {
        return Err(AresError::invalid_input(format!("training set has {n} instances")));
    }
    let streams = Streams::new(cfg.seed);
    let shape = cfg.shape(data.dim(), data.classes());
    let (mut net, start_epoch, mut log) = match &opts.resume {
        Some(ck) => {
            let net = ck.network()?;
            if net.shape() != shape {
                return Err(AresError::invalid_input(format!(
                    "checkpoint network {:?} does not match the configured {:?}",
                    net.shape(),
                    shape
                )));
            }
            let log = TrainLog {
                records: ck.log.clone(),
                timings: Vec::new(),
            };
            (net, ck.epochs_completed, log)
        }
        None => (MlpNetwork::new(&shape, &mut streams.init())?, 0, TrainLog::default()),
    };
    if start_epoch >= cfg.total_epochs {
        return Ok((net, log));
    }

    let t_escape = Instant::now();
    let mut surrogate = surrogate_set(cfg, data, None)?;
    let mut first_escape_s = t_escape.elapsed().as_secs_f64();

    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.total_epochs * steps_per_epoch;
    let spec = cfg.loss_spec();
    let mut tape = GradientTape::for_network(&net);

    let end_epoch = opts.stop_after.map_or(cfg.total_epochs, |k| k.min(cfg.total_epochs));
    for epoch in start_epoch..end_epoch {
        let epoch_start = Instant::now();
        let mut timing = StageTimings {
            epoch,
            escape_s: std::mem::take(&mut first_escape_s),
            ..StageTimings::default()
        };
        if cfg.reescape_each_epoch && epoch > 0 {
            let t = Instant::now();
            surrogate = surrogate_set(cfg, data, Some(epoch))?;
            timing.escape_s += t.elapsed().as_secs_f64();
        }
        let joint = epoch >= cfg.pretrain_epochs && cfg.beta > 0.0;
        let mut order: Vec<usize> = (0..n).collect();
        streams.shuffle(epoch).shuffle(&mut order);
        let mut expansion_rng = streams.expansion(epoch);
        let mut epsilon_rng = streams.epsilon(epoch);
        let last_good = Checkpoint::new(&net, epoch, None, log.records.clone());

        let mut region = None;
        if joint && cfg.expansion_scope == ExpansionScope::Pool && !cfg.rebuild_per_step {
            let refs: Vec<&[f64]> = surrogate.iter().map(|p| p.x.as_slice()).collect();
            let t = Instant::now();
            let feats = features_of(&net, &refs)?;
            timing.expansion_s += t.elapsed().as_secs_f64();
            region = Some(
                build_region(cfg, &feats, &mut expansion_rng, &mut epsilon_rng, &mut timing)
                    .map_err(|e| e.context(format!("epoch {epoch}")))?,
            );
        }

        let (mut cls_sum, mut dis_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let (mut hits, mut seen) = (0usize, 0usize);
        for (step_in_epoch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + step_in_epoch;
            let lr = cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end)?;
            let mut inputs: Vec<&[f64]> = chunk.iter().map(|&i| surrogate[i].x.as_slice()).collect();
            let mut labels: Vec<usize> = chunk.iter().map(|&i| surrogate[i].y).collect();
            if cfg.batch_source == BatchSource::Both {
                inputs.extend(chunk.iter().map(|&i| data.id_train[i].x.as_slice()));
                labels.extend(chunk.iter().map(|&i| data.id_train[i].y));
            }
            let cache = net.forward_batch(&inputs)?;
            for (i, &y) in labels.iter().enumerate() {
                hits += usize::from(predict_class(cache.logits(i)) == y);
            }
            seen += labels.len();

            let ctx = |e: AresError| e.context(format!("epoch {epoch}, batch {step_in_epoch}"));
            let (breakdown, virt) = if joint && chunk.len() >= 2 {
                let count = chunk.len();
                let mut step_timing = StageTimings::default();
                let step_region;
                let region_ref = match (&region, cfg.expansion_scope) {
                    (Some(r), ExpansionScope::Pool) => r,
                    (_, ExpansionScope::Pool) => {
                        let refs: Vec<&[f64]> = surrogate.iter().map(|p| p.x.as_slice()).collect();
                        let t = Instant::now();
                        let feats = features_of(&net, &refs)?;
                        step_timing.expansion_s += t.elapsed().as_secs_f64();
                        step_region = build_region(cfg, &feats, &mut expansion_rng, &mut epsilon_rng, &mut step_timing)
                            .map_err(ctx)?;
                        &step_region
                    }
                    (_, ExpansionScope::Batch) => {
                        let feats: Vec<Vec<f64>> = (0..chunk.len()).map(|i| cache.feature(i).to_vec()).collect();
                        step_region = build_region(cfg, &feats, &mut expansion_rng, &mut epsilon_rng, &mut step_timing)
                            .map_err(ctx)?;
                        &step_region
                    }
                };
                let t = Instant::now();
                let (sub, v) = pick_outliers(cfg, region_ref, count, &mut epsilon_rng).map_err(ctx)?;
                step_timing.estimation_s += t.elapsed().as_secs_f64();

                let attached = cfg.attach_outliers && !sub.source_pairs.is_empty();
                let virt = if attached {
                    let pairs: Vec<(usize, usize, f64)> = v.indices.iter().map(|&k| sub.source_pairs[k]).collect();
                    match cfg.expansion_scope {
                        ExpansionScope::Batch => StepVirtual::Batch(pairs),
                        ExpansionScope::Pool => {
                            let mut sources: Vec<usize> = pairs.iter().flat_map(|p| [p.0, p.1]).collect();
                            sources.sort_unstable();
                            sources.dedup();
                            let local = |s: usize| sources.binary_search(&s).expect("source was collected");
                            let pairs = pairs.iter().map(|&(a, b, l)| (local(a), local(b), l)).collect();
                            StepVirtual::Sources {
                                inputs: sources.iter().map(|&s| surrogate[s].x.as_slice()).collect(),
                                pairs,
                            }
                        }
                    }
                } else {
                    StepVirtual::Detached(v.points)
                };
                let t = Instant::now();
                let result = step_loss(&net, &cache, &labels, &virt, &spec, Some(&mut tape));
                step_timing.divergence_s += t.elapsed().as_secs_f64();
                timing.add(&step_timing);
                (result.map_err(ctx)?, virt)
            } else {
                let virt = StepVirtual::None;
                (step_loss(&net, &cache, &labels, &virt, &spec, Some(&mut tape)).map_err(ctx)?, virt)
            };

            if !breakdown.total.is_finite() || tape.values().any(|g| !g.is_finite()) {
                return Err(abort(&last_good, opts, epoch, step_in_epoch));
            }
            if let Some(every) = opts.gradcheck_every {
                if every > 0 && step % every == 0 {
                    verify_step_gradient(&net, &tape, &inputs, &labels, &virt, &spec, step)?;
                }
            }
            let w = labels.len() as f64;
            cls_sum += breakdown.cls * w;
            dis_sum += breakdown.dis * w;
            total_sum += breakdown.total * w;
            if let Some(c) = cfg.grad_clip {
                tape.clip_norm(c);
            }
            sgd_step(&mut net, &mut tape, lr)?;
        }
        if net.params().any(|p| !p.is_finite()) {
            return Err(abort(&last_good, opts, epoch, steps_per_epoch));
        }

        let seen_f = seen.max(1) as f64;
        let record = EpochRecord {
            epoch,
            lr: cosine_lr(epoch * steps_per_epoch, total_steps, cfg.lr_start, cfg.lr_end)?,
            cls_loss: cls_sum / seen_f,
            dis_loss: dis_sum / seen_f,
            total_loss: total_sum / seen_f,
            train_accuracy: hits as f64 / seen_f,
            id_accuracy: accuracy(&net, &data.id_train)?,
        };
        timing.total_s = epoch_start.elapsed().as_secs_f64() + timing.escape_s;
        if opts.progress {
            println!(
                "epoch={} cls={:.6} dis={:.6} lr={:.6e} acc={:.4}",
                record.epoch, record.cls_loss, record.dis_loss, record.lr, record.id_accuracy
            );
        }
        log.records.push(record);
        log.timings.push(timing);
    }
    Ok((net, log))
}

/// Virtual outliers for the trained network: features of the surrogate set,
/// expanded and estimated as in a joint epoch, bottom `batch_size` of the pool.
pub fn final_virtual_outliers(net: &MlpNetwork, cfg: &TrainConfig, data: &DataBundle) -> Result<OutlierBatch> {
    let streams = Streams::new(cfg.seed);
    let surrogate = surrogate_set(cfg, data, None)?;
    let refs: Vec<&[f64]> = surrogate.iter().map(|p| p.x.as_slice()).collect();
    let feats = features_of(net, &refs)?;
    let mut expansion_rng = streams.expansion(cfg.total_epochs);
    let mut epsilon_rng = streams.epsilon(cfg.total_epochs);
    let region = build_region(cfg, &feats, &mut expansion_rng, &mut epsilon_rng, &mut StageTimings::default())?;
    let count = cfg.batch_size.min(region.pool.len());
    pick_outliers(cfg, &region, count, &mut epsilon_rng).map(|(_, v)| v)
}

/// Sign that makes inliers score higher than outliers under "inlier iff
/// `s·E ≥ γ`", read off training data only: `+1` when the surrogate set's
/// mean energy is at least the final virtual outliers' mean energy.
///
/// The discrimination losses are symmetric in the two energy distributions,
/// so which side ends up higher is decided by training, not by the loss.
pub fn score_orientation(net: &MlpNetwork, cfg: &TrainConfig, data: &DataBundle) -> Result<f64> {
    let surrogate = surrogate_set(cfg, data, None)?;
    let outliers = final_virtual_outliers(net, cfg, data)?;
    let mut inlier = 0.0;
    for p in &surrogate {
        inlier += net.energy_of(&p.x)?;
    }
    let mut outlier = 0.0;
    for f in &outliers.points {
        outlier += net.energy_of_feature(f)?;
    }
    let inlier = inlier / surrogate.len().max(1) as f64;
    let outlier = outlier / outliers.points.len().max(1) as f64;
    Ok(if inlier >= outlier { 1.0 } else { -1.0 })
}
