//! Losses, anchor target assignment, BlackIn and the training loop.

use std::fs;
use std::path::{Path, PathBuf};

use crfnet_nn::{Adam, AdamConfig, Graph, NnError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::Box2D;
use crate::class::NUM_CLASSES;
use crate::crf_net::{encode_deltas, flatten_outputs, unflatten_gradients, AnchorSet, CrfNet, NetworkConfig, Rect};
use crate::dataset::Scene;
use crate::error::{Error, Result};
use crate::filters::{annotation_filter, ground_truth_radar_filter};
use crate::radar::{compose_augmented_image, rasterize_pillars, AugmentedImage, ChannelSpec, CAMERA_CHANNELS, DEFAULT_CYCLES, PILLAR_HEIGHT_M};

/// Which input the network receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Camera plus distance and RCS channels.
    Fusion,
    /// Camera only; the baseline detector.
    ImageOnly,
    /// Camera plus a binary radar existence channel.
    Nrm,
}

impl Mode {
    pub fn radar_spec(self) -> Option<ChannelSpec> {
        match self {
            Mode::Fusion => Some(ChannelSpec::full()),
            Mode::ImageOnly => None,
            Mode::Nrm => Some(ChannelSpec::existence_only()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fusion => "fusion",
            Mode::ImageOnly => "image_only",
            Mode::Nrm => "nrm",
        }
    }
}

/// Ground-truth based data cleaning applied to a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filters {
    None,
    /// Annotation filter: keep only objects with a radar return.
    Af,
    /// Annotation filter plus removal of radar points outside all boxes.
    AfGrf,
}

impl Filters {
    pub fn name(self) -> &'static str {
        match self {
            Filters::None => "none",
            Filters::Af => "af",
            Filters::AfGrf => "af_grf",
        }
    }
}

/// Network input and 2D targets for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene_id: String,
    pub input: AugmentedImage,
    pub ground_truth: Vec<Box2D>,
}

/// Accumulates radar, applies the filters, rasterises the radar channels
/// required by `mode` and projects the surviving boxes.
pub fn prepare_sample(scene: &Scene, filters: Filters, mode: Mode) -> Result<Sample> {
    let points = scene.accumulated_points(DEFAULT_CYCLES);
    let boxes = match filters {
        Filters::None => scene.boxes.clone(),
        Filters::Af | Filters::AfGrf => annotation_filter(&scene.boxes, &points),
    };
    let points = match filters {
        Filters::AfGrf => ground_truth_radar_filter(&points, &scene.boxes),
        _ => points,
    };
    let radar = mode
        .radar_spec()
        .map(|spec| rasterize_pillars(&points, &scene.camera, scene.image_size(), &spec, PILLAR_HEIGHT_M, 1));
    let input = compose_augmented_image(&scene.image, radar.as_ref(), &scene.scene_id)?;
    Ok(Sample {
        scene_id: scene.scene_id.clone(),
        input,
        ground_truth: scene.boxes_2d(&boxes),
    })
}

pub fn prepare_samples(scenes: &[Scene], filters: Filters, mode: Mode) -> Result<Vec<Sample>> {
    scenes.iter().map(|s| prepare_sample(s, filters, mode)).collect()
}

/// Camera channels set to zero, radar untouched.
pub fn apply_blackout(aug: &AugmentedImage) -> AugmentedImage {
    let mut out = aug.clone();
    let c = out.channels();
    for px in out.data.chunks_exact_mut(c) {
        px[..CAMERA_CHANNELS].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// BlackIn: with probability `rate` the camera channels are blacked out.
/// Returns the (possibly modified) image and whether the blackout fired.
pub fn apply_blackin<R: Rng>(aug: &AugmentedImage, rng: &mut R, rate: f64) -> (AugmentedImage, bool) {
    if rng.random::<f64>() < rate {
        (apply_blackout(aug), true)
    } else {
        (aug.clone(), false)
    }
}

/// Mirrors image, radar channels and boxes about the vertical centre line.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let aug = &sample.input;
    let c = aug.channels();
    let mut data = Vec::with_capacity(aug.data.len());
    for row in aug.data.chunks_exact(aug.width * c) {
        for px in row.chunks_exact(c).rev() {
            data.extend_from_slice(px);
        }
    }
    Sample {
        scene_id: sample.scene_id.clone(),
        input: AugmentedImage { data, ..aug.clone() },
        ground_truth: sample.ground_truth.iter().map(|b| b.flipped(aug.width as f64)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorTarget {
    /// Matched to ground-truth box `gt`.
    Positive { gt: usize },
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub targets: Vec<AnchorTarget>,
    pub num_positive: usize,
}

pub fn rect_iou(a: &Rect, b: &Rect) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn box_rect(b: &Box2D) -> Rect {
    [b.x_min, b.y_min, b.x_max, b.y_max]
}

/// IoU ≥ `pos` against the best box makes an anchor positive, below `neg`
/// negative, otherwise ignored. A box without any positive anchor then
/// claims its highest-IoU anchor (first on ties), if that IoU is non-zero.
pub fn assign_targets(anchors: &[Rect], gt: &[Box2D], pos: f64, neg: f64) -> TargetAssignment {
    let gt_rects: Vec<Rect> = gt.iter().map(box_rect).collect();
    let mut targets = Vec::with_capacity(anchors.len());
    let mut best_for_gt: Vec<(usize, f64)> = vec![(0, 0.0); gt.len()];
    let mut has_positive = vec![false; gt.len()];
    for (i, a) in anchors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt_rects.iter().enumerate() {
            let v = rect_iou(a, g);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
            if v > best_for_gt[j].1 {
                best_for_gt[j] = (i, v);
            }
        }
        targets.push(match best {
            Some((j, v)) if v >= pos => {
                has_positive[j] = true;
                AnchorTarget::Positive { gt: j }
            }
            Some((_, v)) if v >= neg => AnchorTarget::Ignore,
            _ => AnchorTarget::Negative,
        });
    }
    for (j, &(i, v)) in best_for_gt.iter().enumerate() {
        if !has_positive[j] && v > 0.0 {
            targets[i] = AnchorTarget::Positive { gt: j };
        }
    }
    let num_positive = targets.iter().filter(|t| matches!(t, AnchorTarget::Positive { .. })).count();
    TargetAssignment { targets, num_positive }
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Focal loss of one logit against a binary target, and its derivative
/// with respect to the logit.
pub fn focal_term(logit: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = crfnet_nn::sigmoid(logit).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if target {
        let loss = -alpha * (1.0 - p).powf(gamma) * p.ln();
        let grad = alpha * (1.0 - p).powf(gamma) * (gamma * p * p.ln() - (1.0 - p));
        (loss, grad)
    } else {
        let q = 1.0 - p;
        let loss = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let grad = (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * q.ln());
        (loss, grad)
    }
}

/// Focal loss over all non-ignored anchors, divided by max(1, positives).
/// `logits` is `[anchor][class]`; returns the loss and d loss / d logits.
pub fn focal_loss(logits: &[f64], assignment: &TargetAssignment, classes: &[usize], alpha: f64, gamma: f64) -> (f64, Vec<f64>) {
    let norm = assignment.num_positive.max(1) as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (i, t) in assignment.targets.iter().enumerate() {
        let label = match t {
            AnchorTarget::Ignore => continue,
            AnchorTarget::Positive { gt } => Some(classes[*gt]),
            AnchorTarget::Negative => None,
        };
        for c in 0..NUM_CLASSES {
            let k = i * NUM_CLASSES + c;
            let (l, g) = focal_term(logits[k], label == Some(c), alpha, gamma);
            total += l;
            grad[k] = g / norm;
        }
    }
    (total / norm, grad)
}

pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Smooth L1 of a residual and its derivative. The quadratic branch is
/// written as `0.5·x·(x/β)` so that both branches agree exactly at |x| = β.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * (x / beta), x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Smooth L1 over the positive anchors, averaged per positive anchor.
/// `deltas` and `targets` are `[anchor][4]`.
pub fn smooth_l1_loss(deltas: &[f64], targets: &[[f64; 4]], assignment: &TargetAssignment, beta: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; deltas.len()];
    if assignment.num_positive == 0 {
        return (0.0, grad);
    }
    let norm = assignment.num_positive as f64;
    let mut total = 0.0;
    for (i, t) in assignment.targets.iter().enumerate() {
        if let AnchorTarget::Positive { .. } = t {
            for j in 0..4 {
                let (l, g) = smooth_l1(deltas[i * 4 + j] - targets[i][j], beta);
                total += l;
                grad[i * 4 + j] = g / norm;
            }
        }
    }
    (total / norm, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub blackin_rate: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub assign_iou_pos: f64,
    pub assign_iou_neg: f64,
    pub regression_weight: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub horizontal_flip: bool,
    /// Write a checkpoint after every epoch, not only the best and last.
    pub keep_epoch_checkpoints: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 25,
            batch_size: 1,
            blackin_rate: 0.2,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            assign_iou_pos: 0.5,
            assign_iou_neg: 0.4,
            regression_weight: 1.0,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            horizontal_flip: false,
            keep_epoch_checkpoints: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size != 1 {
            return bad("only batch_size = 1 is supported");
        }
        if !(0.0..=1.0).contains(&self.blackin_rate) {
            return bad("blackin_rate must lie in [0, 1]");
        }
        if !(0.0 <= self.assign_iou_neg && self.assign_iou_neg <= self.assign_iou_pos && self.assign_iou_pos <= 1.0) {
            return bad("need 0 <= assign_iou_neg <= assign_iou_pos <= 1");
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return bad("focal_alpha must lie in [0, 1] and focal_gamma be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Loss value split into its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub focal: f64,
    pub regression: f64,
}

/// Targets of one sample against a fixed anchor set.
#[derive(Clone, Debug)]
pub struct SampleTargets {
    pub assignment: TargetAssignment,
    pub classes: Vec<usize>,
    pub deltas: Vec<[f64; 4]>,
}

pub fn sample_targets(anchors: &AnchorSet, gt: &[Box2D], cfg: &TrainConfig) -> SampleTargets {
    let assignment = assign_targets(&anchors.boxes, gt, cfg.assign_iou_pos, cfg.assign_iou_neg);
    let deltas = assignment
        .targets
        .iter()
        .zip(&anchors.boxes)
        .map(|(t, a)| match t {
            AnchorTarget::Positive { gt: j } => encode_deltas(a, &box_rect(&gt[*j])),
            _ => [0.0; 4],
        })
        .collect();
    SampleTargets {
        classes: gt.iter().map(|b| b.class_label.index()).collect(),
        assignment,
        deltas,
    }
}

/// Forward pass plus loss. With a recording graph the returned node is the
/// differentiable loss.
pub fn forward_loss<T: crfnet_nn::Real>(
    net: &CrfNet<T>,
    g: &mut Graph<T>,
    input: &AugmentedImage,
    targets: &SampleTargets,
    cfg: &TrainConfig,
) -> Result<(crfnet_nn::NodeId, LossParts)> {
    let levels = net.forward_augmented(g, input)?;
    let flat = flatten_outputs(g, &levels);
    let (focal, d_logits) = focal_loss(&flat.logits, &targets.assignment, &targets.classes, cfg.focal_alpha, cfg.focal_gamma);
    let (reg, mut d_deltas) = smooth_l1_loss(&flat.deltas, &targets.deltas, &targets.assignment, SMOOTH_L1_BETA);
    d_deltas.iter_mut().for_each(|d| *d *= cfg.regression_weight);
    let total = focal + cfg.regression_weight * reg;
    let mut inputs = Vec::with_capacity(2 * levels.len());
    let mut grads = Vec::with_capacity(2 * levels.len());
    for (l, (gc, gb)) in levels.iter().zip(unflatten_gradients::<T>(&levels, &d_logits, &d_deltas)) {
        inputs.extend([l.class, l.boxes]);
        grads.extend([gc, gb]);
    }
    let loss = g.custom_scalar(&inputs, T::of(total), grads)?;
    Ok((
        loss,
        LossParts {
            total,
            focal,
            regression: reg,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossParts,
    pub val: Option<LossParts>,
    pub blackin_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub scene_id: String,
    pub loss: LossParts,
    pub blackin: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

fn divergence(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Nn(NnError::NonFinite { op }) => Error::Divergence {
            epoch,
            step,
            reason: format!("non-finite values in {op}"),
        },
        other => other,
    }
}

pub fn mean_loss(net: &CrfNet<f32>, samples: &[Sample], anchors: &AnchorSet, cfg: &TrainConfig) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for s in samples {
        let targets = sample_targets(anchors, &s.ground_truth, cfg);
        let mut g = Graph::inference();
        let (_, parts) = forward_loss(net, &mut g, &s.input, &targets, cfg)?;
        acc.total += parts.total;
        acc.focal += parts.focal;
        acc.regression += parts.regression;
    }
    let n = samples.len().max(1) as f64;
    Ok(LossParts {
        total: acc.total / n,
        focal: acc.focal / n,
        regression: acc.regression / n,
    })
}

/// Trains `net` in place and leaves it holding the parameters of the epoch
/// with the lowest validation loss (training loss when `val` is empty).
///
/// With `out_dir`, writes `last.ckpt`, `best.ckpt`, optional
/// `epoch-NNN.ckpt`, `losses.csv` (per step) and `epochs.csv`.
pub fn train(net: &mut CrfNet<f32>, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let anchors = AnchorSet::new(net.config());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam());
    let targets: Vec<SampleTargets> = train_set.iter().map(|s| sample_targets(&anchors, &s.ground_truth, cfg)).collect();
    let flipped: Vec<(Sample, SampleTargets)> = if cfg.horizontal_flip {
        train_set
            .iter()
            .map(|s| {
                let f = flip_horizontal(s);
                let t = sample_targets(&anchors, &f.ground_truth, cfg);
                (f, t)
            })
            .collect()
    } else {
        Vec::new()
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut report = TrainReport {
        epochs: Vec::new(),
        steps: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, crfnet_nn::ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossParts::default();
        let mut blackin_count = 0;
        for &i in &order {
            step += 1;
            let (sample, tgt) = if cfg.horizontal_flip && rng.random::<bool>() {
                (&flipped[i].0, &flipped[i].1)
            } else {
                (&train_set[i], &targets[i])
            };
            let (input, blacked) = apply_blackin(&sample.input, &mut rng, cfg.blackin_rate);
            blackin_count += usize::from(blacked);
            let mut g = Graph::new();
            let (loss, parts) = forward_loss(net, &mut g, &input, tgt, cfg).map_err(|e| divergence(epoch, step, e))?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    reason: format!("loss is {}", parts.total),
                });
            }
            let grads = g.backward(loss).map_err(|e| divergence(epoch, step, e.into()))?;
            net.params_mut().accumulate(&grads);
            adam.step(net.params_mut());
            if let Some(p) = net.params().iter().find(|(_, p)| !p.value.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    reason: format!("parameter `{}` became non-finite", p.1.name),
                });
            }
            acc.total += parts.total;
            acc.focal += parts.focal;
            acc.regression += parts.regression;
            report.steps.push(StepRecord {
                epoch,
                step,
                scene_id: sample.scene_id.clone(),
                loss: parts,
                blackin: blacked,
            });
        }
        let n = train_set.len() as f64;
        let train_loss = LossParts {
            total: acc.total / n,
            focal: acc.focal / n,
            regression: acc.regression / n,
        };
        let val = if val_set.is_empty() {
            None
        } else {
            Some(mean_loss(net, val_set, &anchors, cfg).map_err(|e| divergence(epoch, step, e))?)
        };
        let score = val.map_or(train_loss.total, |v| v.total);
        log::info!(
            "epoch {epoch}/{}: train loss {:.5} (focal {:.5}, regression {:.5}){}",
            cfg.epochs,
            train_loss.total,
            train_loss.focal,
            train_loss.regression,
            val.map(|v| format!(", val loss {:.5}", v.total)).unwrap_or_default()
        );
        report.epochs.push(EpochRecord {
            epoch,
            train: train_loss,
            val,
            blackin_count,
        });
        let improved = best.as_ref().is_none_or(|(b, _)| score < *b);
        if improved {
            best = Some((score, net.params().clone()));
            report.best_epoch = epoch;
        }
        if let Some(dir) = out_dir {
            if cfg.keep_epoch_checkpoints {
                net.save(&dir.join(format!("epoch-{epoch:03}.ckpt")))?;
            }
            net.save(&dir.join("last.ckpt"))?;
            if improved {
                net.save(&dir.join("best.ckpt"))?;
            }
        }
    }
    if let Some((_, params)) = best {
        *net.params_mut() = params;
    }
    if let Some(dir) = out_dir {
        write_loss_csv(&dir.join("losses.csv"), &report.steps)?;
        write_epoch_csv(&dir.join("epochs.csv"), &report.epochs)?;
    }
    Ok(report)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_loss_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["epoch", "step", "scene_id", "loss", "focal", "regression", "blackin"])
        .map_err(|e| csv_error(path, e))?;
    for s in steps {
        w.write_record([
            s.epoch.to_string(),
            s.step.to_string(),
            s.scene_id.clone(),
            s.loss.total.to_string(),
            s.loss.focal.to_string(),
            s.loss.regression.to_string(),
            s.blackin.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_epoch_csv(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["epoch", "train_loss", "train_focal", "train_regression", "val_loss", "blackin_count"])
        .map_err(|e| csv_error(path, e))?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train.total.to_string(),
            e.train.focal.to_string(),
            e.train.regression.to_string(),
            e.val.map(|v| v.total.to_string()).unwrap_or_default(),
            e.blackin_count.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Network configuration for `mode` on images of `input_size`.
pub fn network_for_mode(base: &NetworkConfig, mode: Mode) -> NetworkConfig {
    NetworkConfig {
        radar: mode.radar_spec(),
        ..base.clone()
    }
}

pub fn checkpoint_dir(root: &Path, mode: Mode, filters: Filters) -> PathBuf {
    root.join(format!("{}-{}", mode.name(), filters.name()))
}
