//! Decoupled two-stage training.
//!
//! Stage 1 trains the whole model with softmax cross-entropy on instances
//! drawn uniformly from the long-tailed train split. Stage 2 freezes the
//! backbone and fine-tunes the classification and box heads. Each stage-2
//! iteration:
//!
//! 1. builds a batch of jittered proposals for positive instances plus
//!    background features,
//! 2. maps them through the frozen backbone,
//! 3. enqueues positive representations and regression targets into the
//!    feature memory,
//! 4. draws `k x m` memory entries with inverse-score class probabilities,
//! 5. computes the equilibrium loss (or cross-entropy) over batch and memory
//!    entries and smooth-L1 over positives,
//! 6. steps the heads,
//! 7. folds the positives' true-class probabilities into the score tracker.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::box_geometry::{encode_target, sample_box};
use crate::equilibrium_loss::{equilibrium_loss_with_logs, softmax, softmax_ce, Reduction};
use crate::error::{Error, Result};
use crate::feature_memory::{FeatureMemory, MemoryEntry, SamplerConfig};
use crate::metrics::{evaluate_predictions, MetricsReport};
use crate::model::{smooth_l1, Gradients, Model, MomentumSgd, Trainable};
use crate::score_tracker::{frequency_indicator, MeanScoreVector};
use crate::seeding::{self, stream_rng};
use crate::synthetic_world::{Group, World};

/// What drives the margins and the memory sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    /// EMA mean classification score.
    #[default]
    Score,
    /// Normalized train-split class frequencies, fixed for the whole stage.
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Positive instances per iteration; backgrounds are added on top.
    pub batch_size: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    /// Fractions of a stage's epochs after which the rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_fractions: Vec<f64>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Background instances per positive instance.
    pub neg_pos_ratio: f64,
    pub hidden_dim: usize,
    pub repr_dim: usize,
    pub box_loss_weight: f64,
    pub reduction: Reduction,
    /// Only keep jittered proposals above this IoU with their ground truth.
    pub min_proposal_iou: Option<f64>,
    pub alpha: f64,
    pub background_substitute: f64,
    /// Initial foreground score; `None` means `1 / (C + 1)`.
    pub init_score: Option<f64>,
    pub indicator: Indicator,
    pub ebl_enabled: bool,
    pub mfs_enabled: bool,
    pub memory_capacity: usize,
    pub sampler: SamplerConfig,
    /// Memory draws also update the score tracker.
    pub memory_updates_tracker: bool,
    /// Start stage 2 from the scores tracked during stage 1.
    pub warm_start_scores: bool,
    pub reinit_classifier: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 12,
            stage2_epochs: 6,
            batch_size: 64,
            stage1_lr: 0.02,
            stage2_lr: 0.02,
            lr_decay_fractions: vec![0.5, 5.0 / 6.0],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            neg_pos_ratio: 3.0,
            hidden_dim: 64,
            repr_dim: 64,
            box_loss_weight: 1.0,
            reduction: Reduction::Mean,
            min_proposal_iou: None,
            alpha: crate::score_tracker::DEFAULT_ALPHA,
            background_substitute: crate::score_tracker::DEFAULT_BACKGROUND_SUBSTITUTE,
            init_score: None,
            indicator: Indicator::Score,
            ebl_enabled: true,
            mfs_enabled: true,
            memory_capacity: 80,
            sampler: SamplerConfig::default(),
            memory_updates_tracker: true,
            warm_start_scores: false,
            reinit_classifier: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden_dim == 0 || self.repr_dim == 0 {
            return Err(Error::invalid("train", "batch size and layer widths must be positive"));
        }
        for (name, v) in [("stage1_lr", self.stage1_lr), ("stage2_lr", self.stage2_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("{v} must be positive")));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::invalid("lr_decay_factor", "must be in (0, 1)"));
        }
        if self.lr_decay_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid("lr_decay_fractions", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("momentum", "momentum in [0, 1), weight decay >= 0"));
        }
        if !(self.neg_pos_ratio.is_finite() && self.neg_pos_ratio >= 0.0) {
            return Err(Error::invalid("neg_pos_ratio", "must be non-negative"));
        }
        if self.box_loss_weight < 0.0 {
            return Err(Error::invalid("box_loss_weight", "must be non-negative"));
        }
        if let Some(t) = self.min_proposal_iou {
            // The jitter family reaches down to IoU 4/9.
            if !(0.0..0.99).contains(&t) {
                return Err(Error::invalid("min_proposal_iou", "must be in [0, 0.99)"));
            }
        }
        if self.memory_capacity == 0 {
            return Err(Error::invalid("memory_capacity", "must be positive"));
        }
        self.sampler.validate()?;
        // Reuse the tracker's own parameter checks.
        MeanScoreVector::new(1, self.alpha, self.background_substitute, self.init_score.unwrap_or(0.5))?;
        Ok(())
    }

    /// Learning rate for `epoch` (0-based) of a stage with `epochs` epochs.
    pub fn learning_rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        let drops = self
            .lr_decay_fractions
            .iter()
            .filter(|&&f| {
                let at = (f * epochs as f64).round() as usize;
                at > 0 && epoch >= at
            })
            .count();
        base * self.lr_decay_factor.powi(drops as i32)
    }

    pub fn new_tracker(&self, num_foreground: usize) -> Result<MeanScoreVector> {
        match self.init_score {
            Some(v) => MeanScoreVector::new(num_foreground, self.alpha, self.background_substitute, v),
            None => MeanScoreVector::with_uniform_init(num_foreground, self.alpha, self.background_substitute),
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub learning_rate: f64,
    pub cls_loss: f64,
    pub box_loss: f64,
    pub memory_samples: usize,
    pub overall_accuracy: f64,
    pub balanced_accuracy: f64,
    /// `None` when the world has no class in the group.
    pub rare_accuracy: Option<f64>,
    pub common_accuracy: Option<f64>,
    pub frequent_accuracy: Option<f64>,
    pub score_dispersion: f64,
    /// Mean of the tracked foreground scores at epoch end.
    pub tracked_score_mean: f64,
}

pub const HISTORY_HEADER: &str = "stage,epoch,learning_rate,cls_loss,box_loss,memory_samples,overall_accuracy,balanced_accuracy,rare_accuracy,common_accuracy,frequent_accuracy,score_dispersion,tracked_score_mean";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{},{:?},{:?},{:?},{},{:?},{:?},{},{},{},{:?},{:?}",
            self.stage,
            self.epoch,
            self.learning_rate,
            self.cls_loss,
            self.box_loss,
            self.memory_samples,
            self.overall_accuracy,
            self.balanced_accuracy,
            opt(self.rare_accuracy),
            opt(self.common_accuracy),
            opt(self.frequent_accuracy),
            self.score_dispersion,
            self.tracked_score_mean
        )
    }
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Scores tracked during the stage (stage 1 tracks them for diagnostics
    /// and warm starts only).
    pub tracker: MeanScoreVector,
    /// Final feature memory (stage 2 with memory sampling only).
    pub memory: Option<FeatureMemory>,
}

struct Item {
    feature: Vec<f64>,
    label: usize,
    target: Option<[f64; 4]>,
}

fn assemble_batch<R: Rng>(
    world: &World,
    positives: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<Item>> {
    let mut items = Vec::with_capacity(positives.len() * (1 + cfg.neg_pos_ratio.ceil() as usize));
    for &i in positives {
        let inst = &world.train()[i];
        let proposal = sample_box(&inst.gt_box, cfg.min_proposal_iou, rng);
        let feature = world.extract_feature(inst, &proposal, Some(rng.random()))?;
        items.push(Item {
            feature,
            label: inst.class,
            target: Some(encode_target(&proposal, &inst.gt_box).to_array()),
        });
    }
    let negatives = (cfg.neg_pos_ratio * positives.len() as f64).round() as usize;
    for _ in 0..negatives {
        let (feature, label) = world.background_sample(rng);
        items.push(Item {
            feature,
            label,
            target: None,
        });
    }
    Ok(items)
}

fn epoch_order<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn check_world(world: &World, model: &Model, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if model.feature_dim() != world.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: world.feature_dim(),
            actual: model.feature_dim(),
        });
    }
    if model.num_classes() != world.num_classes() + 1 {
        return Err(Error::DimensionMismatch {
            expected: world.num_classes() + 1,
            actual: model.num_classes(),
        });
    }
    Ok(())
}

/// Fresh model sized for `world`, initialized from the config seed.
pub fn init_model(world: &World, cfg: &TrainConfig) -> Model {
    let mut rng = stream_rng(cfg.seed, seeding::MODEL_INIT);
    Model::new(
        world.feature_dim(),
        cfg.hidden_dim,
        cfg.repr_dim,
        world.num_classes() + 1,
        &mut rng,
    )
}

fn record(
    stage: u8,
    epoch: usize,
    lr: f64,
    cls_loss: f64,
    box_loss: f64,
    memory_samples: usize,
    report: &MetricsReport,
    tracker: &MeanScoreVector,
) -> EpochRecord {
    let fg = tracker.foreground();
    EpochRecord {
        stage,
        epoch,
        learning_rate: lr,
        cls_loss,
        box_loss,
        memory_samples,
        overall_accuracy: report.overall_accuracy,
        balanced_accuracy: report.balanced_accuracy,
        rare_accuracy: report.group(Group::Rare).map(|g| g.accuracy),
        common_accuracy: report.group(Group::Common).map(|g| g.accuracy),
        frequent_accuracy: report.group(Group::Frequent).map(|g| g.accuracy),
        score_dispersion: report.score_dispersion,
        tracked_score_mean: fg.iter().sum::<f64>() / fg.len() as f64,
    }
}

/// Stage 1: all parameters, plain cross-entropy, uniform instance sampling.
pub fn run_stage1(world: &World, mut model: Model, cfg: &TrainConfig) -> Result<StageOutput> {
    check_world(world, &model, cfg)?;
    let mut rng = stream_rng(cfg.seed, seeding::STAGE1);
    let mut opt = MomentumSgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut grads = Gradients::zeros_for(&model);
    let mut tracker = cfg.new_tracker(world.num_classes())?;
    let mut history = Vec::with_capacity(cfg.stage1_epochs);
    for epoch in 0..cfg.stage1_epochs {
        let lr = cfg.learning_rate(cfg.stage1_lr, epoch, cfg.stage1_epochs);
        let order = epoch_order(world.train().len(), &mut rng);
        let (mut cls_sum, mut box_sum, mut batches) = (0.0, 0.0, 0usize);
        for (iteration, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items = assemble_batch(world, chunk, cfg, &mut rng)?;
            grads.clear();
            let w_cls = cfg.reduction.weight(items.len());
            let w_box = cfg.box_loss_weight * cfg.reduction.weight(chunk.len());
            let (mut cls_loss, mut box_loss) = (0.0, 0.0);
            for item in &items {
                let acts = model.backbone(&item.feature);
                let z = model.classifier.forward(&acts.representation);
                let ce = softmax_ce(&z, item.label)?;
                cls_loss += w_cls * ce.loss;
                let logit_grad: Vec<f64> = ce.gradient.iter().map(|g| g * w_cls).collect();
                let box_grad = item.target.map(|t| {
                    let (l, g) = smooth_l1(&model.box_head.forward(&acts.representation), &t);
                    box_loss += w_box * l;
                    g.into_iter().map(|v| v * w_box).collect::<Vec<_>>()
                });
                let dr = grads.accumulate_heads(&model, &acts.representation, &logit_grad, box_grad.as_deref(), true);
                grads.accumulate_backbone(&model, &acts, &dr);
                if item.label < world.num_classes() {
                    tracker.update(item.label, softmax(&z)[item.label])?;
                }
            }
            if !(cls_loss.is_finite() && box_loss.is_finite()) {
                return Err(Error::Diverged {
                    stage: "stage 1",
                    epoch,
                    iteration,
                    loss: cls_loss + box_loss,
                });
            }
            opt.step(&mut model, &grads, lr, Trainable::All);
            cls_sum += cls_loss;
            box_sum += box_loss;
            batches += 1;
        }
        if !model.all_finite() {
            return Err(Error::Diverged {
                stage: "stage 1",
                epoch,
                iteration: batches,
                loss: f64::NAN,
            });
        }
        let report = evaluate(world, &model)?;
        let n = batches.max(1) as f64;
        history.push(record(1, epoch, lr, cls_sum / n, box_sum / n, 0, &report, &tracker));
    }
    Ok(StageOutput {
        model,
        history,
        tracker,
        memory: None,
    })
}

/// Stage 2: frozen backbone, heads fine-tuned with the equilibrium loss and
/// memory-augmented feature sampling as configured. `tracker` is the starting
/// score vector; it is ignored under [`Indicator::Frequency`].
pub fn run_stage2(
    world: &World,
    mut model: Model,
    tracker: MeanScoreVector,
    cfg: &TrainConfig,
) -> Result<StageOutput> {
    check_world(world, &model, cfg)?;
    if tracker.num_foreground() != world.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: world.num_classes(),
            actual: tracker.num_foreground(),
        });
    }
    let mut rng = stream_rng(cfg.seed, seeding::STAGE2);
    let mut sampler_rng = stream_rng(cfg.seed, seeding::SAMPLER);
    if cfg.reinit_classifier {
        let mut init_rng = stream_rng(cfg.seed, seeding::HEAD_REINIT);
        model.reinit_classifier(&mut init_rng);
    }
    let (mut indicator, tracks) = match cfg.indicator {
        Indicator::Score => (tracker, true),
        Indicator::Frequency => {
            let counts: Vec<u64> = world.train_counts().iter().map(|&c| c as u64).collect();
            (frequency_indicator(&counts, cfg.background_substitute)?, false)
        }
    };
    let mut memory = if cfg.mfs_enabled {
        Some(FeatureMemory::new(world.num_classes(), cfg.memory_capacity, model.repr_dim())?)
    } else {
        None
    };
    let mut opt = MomentumSgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut grads = Gradients::zeros_for(&model);
    let mut history = Vec::with_capacity(cfg.stage2_epochs);
    let background = world.background_label();
    for epoch in 0..cfg.stage2_epochs {
        let lr = cfg.learning_rate(cfg.stage2_lr, epoch, cfg.stage2_epochs);
        let order = epoch_order(world.train().len(), &mut rng);
        let (mut cls_sum, mut box_sum, mut batches, mut drawn) = (0.0, 0.0, 0usize, 0usize);
        for (iteration, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items = assemble_batch(world, chunk, cfg, &mut rng)?;
            // (representation, label, box target, counts toward tracker)
            let mut rows: Vec<(Vec<f64>, usize, Option<[f64; 4]>, bool)> = items
                .into_iter()
                .map(|it| {
                    let r = model.backbone(&it.feature).representation;
                    (r, it.label, it.target, it.label != background)
                })
                .collect();
            if let Some(mem) = memory.as_mut() {
                let fresh = rows
                    .iter()
                    .filter(|r| r.1 != background)
                    .map(|(r, label, t, _)| MemoryEntry {
                        feature: r.clone(),
                        target: crate::box_geometry::RegressionTarget::from_array(
                            t.expect("positives carry targets"),
                        ),
                        class: *label,
                    })
                    .collect();
                mem.enqueue(fresh)?;
                let sampled = mem.sample(&indicator, &cfg.sampler, &mut sampler_rng)?;
                drawn += sampled.len();
                rows.extend(sampled.into_iter().map(|e| {
                    (
                        e.feature.clone(),
                        e.class,
                        Some(e.target.to_array()),
                        cfg.memory_updates_tracker,
                    )
                }));
            }
            grads.clear();
            let n_box = rows.iter().filter(|r| r.2.is_some()).count();
            let w_cls = cfg.reduction.weight(rows.len());
            let w_box = cfg.box_loss_weight * cfg.reduction.weight(n_box);
            let log_s = indicator.log_scores();
            let (mut cls_loss, mut box_loss) = (0.0, 0.0);
            let mut observed = Vec::new();
            for (r, label, target, counts) in &rows {
                let z = model.classifier.forward(r);
                let res = if cfg.ebl_enabled {
                    if z.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("logits"));
                    }
                    equilibrium_loss_with_logs(&z, *label, &log_s)
                } else {
                    softmax_ce(&z, *label)?
                };
                cls_loss += w_cls * res.loss;
                let logit_grad: Vec<f64> = res.gradient.iter().map(|g| g * w_cls).collect();
                let box_grad = target.map(|t| {
                    let (l, g) = smooth_l1(&model.box_head.forward(r), &t);
                    box_loss += w_box * l;
                    g.into_iter().map(|v| v * w_box).collect::<Vec<_>>()
                });
                grads.accumulate_heads(&model, r, &logit_grad, box_grad.as_deref(), false);
                if *counts {
                    observed.push((*label, softmax(&z)[*label]));
                }
            }
            if !(cls_loss.is_finite() && box_loss.is_finite()) {
                return Err(Error::Diverged {
                    stage: "stage 2",
                    epoch,
                    iteration,
                    loss: cls_loss + box_loss,
                });
            }
            opt.step(&mut model, &grads, lr, Trainable::HeadsOnly);
            if tracks {
                for (label, p) in observed {
                    indicator.update(label, p)?;
                }
            }
            cls_sum += cls_loss;
            box_sum += box_loss;
            batches += 1;
        }
        if !model.all_finite() {
            return Err(Error::Diverged {
                stage: "stage 2",
                epoch,
                iteration: batches,
                loss: f64::NAN,
            });
        }
        let report = evaluate(world, &model)?;
        let n = batches.max(1) as f64;
        history.push(record(2, epoch, lr, cls_sum / n, box_sum / n, drawn, &report, &indicator));
    }
    Ok(StageOutput {
        model,
        history,
        tracker: indicator,
        memory,
    })
}

/// Starting tracker for stage 2: the stage-1 scores under
/// `warm_start_scores`, otherwise a fresh one.
pub fn stage2_tracker(stage1: &StageOutput, cfg: &TrainConfig) -> Result<MeanScoreVector> {
    if cfg.warm_start_scores {
        MeanScoreVector::from_scores(
            stage1.tracker.foreground().to_vec(),
            cfg.alpha,
            cfg.background_substitute,
        )
    } else {
        cfg.new_tracker(stage1.tracker.num_foreground())
    }
}

/// Both stages from a fresh model.
pub fn run_pipeline(world: &World, cfg: &TrainConfig) -> Result<(StageOutput, StageOutput)> {
    let stage1 = run_stage1(world, init_model(world, cfg), cfg)?;
    let tracker = stage2_tracker(&stage1, cfg)?;
    let stage2 = run_stage2(world, stage1.model.clone(), tracker, cfg)?;
    Ok((stage1, stage2))
}

/// Class probabilities for every val instance, seen through its ground-truth
/// box with a per-instance observation-noise draw.
pub fn val_probabilities(world: &World, model: &Model) -> Result<Vec<Vec<f64>>> {
    world
        .val()
        .iter()
        .map(|inst| {
            let key = seeding::derive_seed(seeding::EVAL, inst.id as u64);
            let f = world.extract_feature(inst, &inst.gt_box, Some(key))?;
            Ok(softmax(&model.logits(&f)))
        })
        .collect()
}

/// Val-split metrics for `model`.
pub fn evaluate(world: &World, model: &Model) -> Result<MetricsReport> {
    let labels: Vec<usize> = world.val().iter().map(|i| i.class).collect();
    let probs = val_probabilities(world, model)?;
    evaluate_predictions(&labels, &probs, world.train_counts(), &world.groups())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_drops_at_half_and_five_sixths() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (0..6).map(|e| cfg.learning_rate(1.0, e, 6)).collect();
        assert_eq!(lrs[..3], [1.0, 1.0, 1.0]);
        assert!((lrs[3] - 0.1).abs() < 1e-15 && (lrs[4] - 0.1).abs() < 1e-15);
        assert!((lrs[5] - 0.01).abs() < 1e-15);
        let lrs: Vec<f64> = (0..24).map(|e| cfg.learning_rate(1.0, e, 24)).collect();
        assert_eq!(lrs.iter().filter(|&&l| l == 1.0).count(), 12);
        assert_eq!(lrs.iter().filter(|&&l| (l - 0.01).abs() < 1e-15).count(), 4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr_decay_factor: 1.0, ..Default::default() },
            TrainConfig { stage1_lr: -1.0, ..Default::default() },
            TrainConfig { alpha: 1.0, ..Default::default() },
            TrainConfig { background_substitute: 0.0, ..Default::default() },
            TrainConfig { min_proposal_iou: Some(1.0), ..Default::default() },
            TrainConfig { memory_capacity: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
