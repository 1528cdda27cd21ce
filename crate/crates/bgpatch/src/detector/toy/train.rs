//! Deterministic from-scratch training for the bundled detector.
//!
//! Weights are a pure function of `(seed, config)`: the dataset is derived
//! from the seed, the shuffle order from a dedicated RNG stream, and batch
//! gradients are reduced in fixed index order even though per-image passes
//! run on the rayon pool. Training the same seed twice yields bit-identical
//! parameters, which is what lets tests cache weights by seed.
//!
//! The recipe is a standard dense-head setup: anchors matching a ground
//! truth box at IoU ≥ 0.5 train as positives (every object also force-claims
//! its single best anchor so nothing goes unsupervised), anchors under 0.4
//! train as background with online hard-negative mining, and the band in
//! between is ignored. Positives additionally regress encoded box offsets
//! under a squared-error penalty. Updates use Adam with decoupled weight
//! decay.
//!
//! The synthetic dataset has an unbounded index space, so indices at or
//! beyond `train_images` are never seen during training and make a natural
//! held-out split for evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::boxes::{iou, BoxCwh, GroundTruth};
use crate::detector::encode_offsets;
use crate::error::{BgError, Result};
use crate::image::ImageBuffer;

use super::layers::Tensor3;
use super::synthetic::{generate_dataset, SyntheticConfig};
use super::{
    ToyDetector, ToyGrads, TrainInfo, ANCHORS_PER_CELL, ANCHOR_BLOCK, GRID, HEAD_CHANNELS,
    NUM_SCORES,
};

/// Anchor IoU at or above which a candidate trains as a positive.
const POSITIVE_IOU: f64 = 0.5;
/// Anchor IoU below which a candidate trains as background.
const NEGATIVE_IOU: f64 = 0.4;
/// Score floor inside training cross-entropy.
const CE_CLAMP: f64 = 1e-12;
/// RNG stream for the shuffle order, far outside the per-image streams.
const SHUFFLE_STREAM: u64 = u64::MAX;
/// A healthy run keeps the loss in single digits; past this it has blown
/// up even if still finite (clamps keep cross-entropy bounded, so NaN/inf
/// alone is not a reliable divergence signal).
const LOSS_CEILING: f64 = 1e10;
/// Parameters of a healthy run stay O(1).
const PARAM_CEILING: f64 = 1e9;

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct ToyTrainConfig {
    /// Distinct training images (dataset indices `0..train_images`).
    pub train_images: usize,
    /// Full passes over the training set.
    pub epochs: usize,
    /// Images per optimizer step.
    pub batch_size: usize,
    /// Adam step size.
    pub learning_rate: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Weight on the squared-error offset term.
    pub offset_loss_weight: f64,
    /// Mined negatives per positive.
    pub hard_negative_ratio: usize,
    /// Lower bound on mined negatives per image.
    pub min_negatives: usize,
    /// Classification target smoothing in `[0, 1)` for positive slots.
    /// Nonzero smoothing bounds the optimal logit margins, which keeps the
    /// trained scores off the softmax saturation plateau — a detector
    /// whose confidences are exactly 1.0 yields no usable suppression
    /// gradient.
    pub label_smoothing: f64,
    /// Target smoothing in `[0, 1)` for mined background slots, kept as a
    /// separate knob from [`Self::label_smoothing`] so the depth of the
    /// background-versus-object margin can be tuned independently of the
    /// positive-class margins.
    pub background_smoothing: f64,
    /// Dataset parameters; the image size must match the detector input.
    pub synthetic: SyntheticConfig,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            train_images: 240,
            epochs: 20,
            batch_size: 10,
            learning_rate: 2e-3,
            weight_decay: 1e-5,
            offset_loss_weight: 1.0,
            hard_negative_ratio: 1,
            min_negatives: 2,
            label_smoothing: 0.3,
            background_smoothing: 0.3,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl ToyTrainConfig {
    /// A much smaller budget for smoke tests: deterministic and quick, at
    /// the cost of detection quality.
    pub fn quick() -> Self {
        Self { train_images: 48, epochs: 6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_images == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(BgError::Config(
                "train_images, epochs, and batch_size must all be nonzero".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(BgError::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.offset_loss_weight < 0.0 {
            return Err(BgError::Config(
                "weight_decay and offset_loss_weight must be >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(BgError::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(0.0..1.0).contains(&self.background_smoothing) {
            return Err(BgError::Config(format!(
                "background_smoothing must be in [0, 1), got {}",
                self.background_smoothing
            )));
        }
        if self.synthetic.image_size != super::INPUT_SIZE {
            return Err(BgError::Config(format!(
                "dataset image size {} does not match detector input {}",
                self.synthetic.image_size,
                super::INPUT_SIZE
            )));
        }
        Ok(())
    }
}

/// What one head slot trains towards.
#[derive(Debug, Clone, PartialEq)]
enum SlotTarget {
    /// Matched to an object: classify as `class` and regress `offsets`.
    Positive { class: usize, offsets: [f64; 4] },
    /// Classify as background (subject to hard-negative mining).
    Negative,
    /// Matching is ambiguous; contributes nothing.
    Ignore,
}

/// Anchor-to-object assignment for one image.
fn assign_targets(anchors: &[BoxCwh], gt: &GroundTruth) -> Vec<SlotTarget> {
    let m = anchors.len();
    let mut best_iou = vec![0.0f64; m];
    let mut best_gt = vec![0usize; m];
    for (j, anchor) in anchors.iter().enumerate() {
        for (g, b) in gt.boxes.iter().enumerate() {
            let v = iou(anchor, b);
            if v > best_iou[j] {
                best_iou[j] = v;
                best_gt[j] = g;
            }
        }
    }
    let mut slots: Vec<SlotTarget> = (0..m)
        .map(|j| {
            if best_iou[j] >= POSITIVE_IOU {
                let g = best_gt[j];
                SlotTarget::Positive {
                    class: gt.labels[g],
                    offsets: encode_offsets(&anchors[j], &gt.boxes[g]),
                }
            } else if best_iou[j] < NEGATIVE_IOU {
                SlotTarget::Negative
            } else {
                SlotTarget::Ignore
            }
        })
        .collect();
    // Every object claims its best anchor even below the positive
    // threshold; on a contested anchor the higher IoU wins.
    let mut forced = vec![f64::NEG_INFINITY; m];
    for (g, b) in gt.boxes.iter().enumerate() {
        let mut bj = 0;
        let mut bi = f64::NEG_INFINITY;
        for (j, anchor) in anchors.iter().enumerate() {
            let v = iou(anchor, b);
            if v > bi {
                bi = v;
                bj = j;
            }
        }
        if bi > forced[bj] {
            forced[bj] = bi;
            slots[bj] = SlotTarget::Positive {
                class: gt.labels[g],
                offsets: encode_offsets(&anchors[bj], b),
            };
        }
    }
    slots
}

/// Detection index to `(grid_y, grid_x, anchor)`.
#[inline]
fn det_cell(j: usize) -> (usize, usize, usize) {
    let a = j % ANCHORS_PER_CELL;
    let cell = j / ANCHORS_PER_CELL;
    (cell / GRID, cell % GRID, a)
}

/// Forward + backward for one image; accumulates parameter gradients and
/// returns the image loss.
fn image_loss_and_grads(
    det: &ToyDetector,
    img: &ImageBuffer,
    slots: &[SlotTarget],
    cfg: &ToyTrainConfig,
    grads: &mut ToyGrads,
) -> Result<f64> {
    let (out, cache) = det.forward_cached(img)?;
    let mut dhead = Tensor3::zeros(HEAD_CHANNELS, GRID, GRID);
    let npos = slots
        .iter()
        .filter(|s| matches!(s, SlotTarget::Positive { .. }))
        .count()
        .max(1);
    let inv = 1.0 / npos as f64;
    let mut loss = 0.0;
    // Smoothed classification target: the labelled class gets
    // 1 - e + e/K, every other class e/K. Positive and background slots
    // carry separate smoothing strengths.
    let target_for = |k: usize, class: usize, eps: f64| {
        let off = eps / NUM_SCORES as f64;
        if k == class {
            1.0 - eps + off
        } else {
            off
        }
    };
    let smoothed_ce = |scores: &[f64], class: usize, eps: f64| -> f64 {
        (0..NUM_SCORES)
            .map(|k| -target_for(k, class, eps) * scores[k].max(CE_CLAMP).ln())
            .sum()
    };

    for (j, slot) in slots.iter().enumerate() {
        let SlotTarget::Positive { class, offsets: target } = slot else {
            continue;
        };
        let rec = &out.detections[j];
        let (gy, gx, a) = det_cell(j);
        let base = a * ANCHOR_BLOCK;
        loss += smoothed_ce(&rec.scores, *class, cfg.label_smoothing) * inv;
        // Softmax cross-entropy folds to (s - target) on the logits.
        for k in 0..NUM_SCORES {
            let t = target_for(k, *class, cfg.label_smoothing);
            dhead.set(base + k, gy, gx, (rec.scores[k] - t) * inv);
        }
        for k in 0..4 {
            let d = rec.pred_offsets[k] - target[k];
            loss += cfg.offset_loss_weight * d * d * inv;
            dhead.set(
                base + NUM_SCORES + k,
                gy,
                gx,
                2.0 * cfg.offset_loss_weight * d * inv,
            );
        }
    }

    // Hard negatives: the background candidates the head currently gets
    // most wrong, by descending cross-entropy (index breaks ties).
    let mut negatives: Vec<(f64, usize)> = slots
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, SlotTarget::Negative))
        .map(|(j, _)| (smoothed_ce(&out.detections[j].scores, 0, cfg.background_smoothing), j))
        .collect();
    negatives.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let keep = (cfg.hard_negative_ratio * npos)
        .max(cfg.min_negatives)
        .min(negatives.len());
    for &(ce, j) in &negatives[..keep] {
        let rec = &out.detections[j];
        let (gy, gx, a) = det_cell(j);
        let base = a * ANCHOR_BLOCK;
        loss += ce * inv;
        for k in 0..NUM_SCORES {
            let t = target_for(k, 0, cfg.background_smoothing);
            dhead.set(base + k, gy, gx, (rec.scores[k] - t) * inv);
        }
    }

    det.backprop(&cache, &dhead, Some(grads), false);
    Ok(loss)
}

/// Adam with decoupled weight decay over a flat parameter vector.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(param_count: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -=
                self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Full training run; returns the detector and per-epoch mean losses.
fn run_training(seed: u64, cfg: &ToyTrainConfig) -> Result<(ToyDetector, Vec<f64>)> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.synthetic, seed, cfg.train_images);
    let mut det = ToyDetector::random_init(seed);
    let slots: Vec<Vec<SlotTarget>> = data
        .iter()
        .map(|(_, gt)| assign_targets(det.anchors(), gt))
        .collect();
    let param_count = det.params().param_count();
    let mut adam = Adam::new(param_count, cfg.learning_rate, cfg.weight_decay);
    let mut flat = det.params().to_flat();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // Cosine decay from the base step size down to a tenth of it.
        let progress = if cfg.epochs > 1 {
            epoch as f64 / (cfg.epochs - 1) as f64
        } else {
            0.0
        };
        adam.lr = cfg.learning_rate
            * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            // Per-image passes run in parallel; the reduction below walks
            // them in batch order so the sum is reproducible bit for bit.
            let per_image: Vec<Result<(f64, ToyGrads)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = ToyGrads::zeros(param_count);
                    let l = image_loss_and_grads(&det, &data[i].0, &slots[i], cfg, &mut g)?;
                    Ok((l, g))
                })
                .collect();
            let inv_batch = 1.0 / batch.len() as f64;
            let mut mean_grads = ToyGrads::zeros(param_count);
            let mut loss_sum = 0.0;
            for r in per_image {
                let (l, g) = r?;
                loss_sum += l;
                mean_grads.add_scaled(&g, inv_batch);
            }
            let batch_loss = loss_sum * inv_batch;
            if !batch_loss.is_finite() || batch_loss > LOSS_CEILING {
                return Err(BgError::TrainingDiverged(format!(
                    "batch loss became {batch_loss} in epoch {epoch}"
                )));
            }
            adam.step(&mut flat, &mean_grads.flat);
            if flat.iter().any(|v| !v.is_finite() || v.abs() > PARAM_CEILING) {
                return Err(BgError::TrainingDiverged(format!(
                    "runaway parameter after update in epoch {epoch}"
                )));
            }
            det.params_mut().assign_from_flat(&flat)?;
            epoch_loss += batch_loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }

    det.set_train_info(TrainInfo {
        seed,
        epochs: cfg.epochs,
        train_images: cfg.train_images,
        final_loss: history.last().copied(),
    });
    Ok((det, history))
}

/// Trains the bundled detector with default hyperparameters.
pub fn toy_ssm_build(seed: u64) -> Result<ToyDetector> {
    toy_ssm_build_with(seed, &ToyTrainConfig::default())
}

/// Trains the bundled detector with explicit hyperparameters.
pub fn toy_ssm_build_with(seed: u64, cfg: &ToyTrainConfig) -> Result<ToyDetector> {
    run_training(seed, cfg).map(|(det, _)| det)
}
