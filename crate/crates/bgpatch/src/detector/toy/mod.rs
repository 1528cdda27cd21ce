//! A compact convolutional detector that is trained, run, and attacked
//! entirely inside this crate.
//!
//! The network is small enough to train from scratch in seconds on a
//! desktop CPU yet structured like the real thing: a strided convolutional
//! backbone, a global-context branch, and a dense single-shot head that
//! emits class scores and box offsets for two anchors at every cell of a
//! 12x12 grid (288 candidates per 96x96 image).
//!
//! Two properties matter more than raw accuracy here and shape the design:
//!
//! * **Exact gradients.** Activations are softplus, arithmetic is `f64`,
//!   and the only non-smooth pieces are the max pools, whose kinks sit on
//!   measure-zero ties — so the analytic input gradient agrees with
//!   central finite differences to high precision at generic points. That
//!   is what the attack optimizer consumes.
//! * **Global pixel coupling.** A global-average-pool branch feeds a
//!   per-channel context vector back into the trunk, so every input pixel
//!   influences every detection. Background pixels far from an object
//!   still carry usable gradient signal, which is the whole premise of a
//!   background-patch attack.
//!
//! Determinism holds end to end: weights are a pure function of the
//! training seed, and forward/backward passes are bit-reproducible across
//! runs and thread counts.

pub mod synthetic;
pub mod train;

mod layers;

use std::ops::Range;
use std::path::Path;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BoxCwh, GroundTruth};
use crate::detector::{
    DetectionRecord, DetectorMetadata, InputGradient, LossWeights, SingleShotDetector, SsmOutputs,
    StageKind,
};
use crate::error::{BgError, Result};
use crate::image::ImageBuffer;
use crate::losses::{loss_output_gradients, no_active_loss, OutputGradients};
use crate::patches::PatchSet;

use layers::{
    global_avg_pool, maxpool2_backward, maxpool2_forward, softmax, softmax_backward,
    softplus_backward, softplus_forward, Conv2d, Dense, Tensor3,
};

/// Square input side in pixels.
pub const INPUT_SIZE: usize = 96;
/// Detection stride: one grid cell per 8x8 pixel block.
pub const STRIDE: usize = 8;
/// Grid side length.
pub const GRID: usize = INPUT_SIZE / STRIDE;
/// Square anchor side lengths at every grid cell.
pub const ANCHOR_SIZES: [f64; 2] = [16.0, 30.0];
/// Anchors per grid cell.
pub const ANCHORS_PER_CELL: usize = ANCHOR_SIZES.len();
/// Object classes scored by the head (background excluded).
pub const NUM_OBJECT_CLASSES: usize = 3;
/// Fixed detection count per image: `GRID * GRID * ANCHORS_PER_CELL`.
pub const NUM_DETECTIONS: usize = GRID * GRID * ANCHORS_PER_CELL;

const NUM_SCORES: usize = NUM_OBJECT_CLASSES + 1;
/// Head channels per anchor: class logits plus four box offsets.
const ANCHOR_BLOCK: usize = NUM_SCORES + 4;
const HEAD_CHANNELS: usize = ANCHORS_PER_CELL * ANCHOR_BLOCK;
/// Input pixels are mapped from `[0, 255]` to `[-1, 1]` before the trunk.
const PIXEL_SCALE: f64 = 127.5;

const CH1: usize = 12;
const CH2: usize = 24;
const CH3: usize = 32;
const CH4: usize = 48;
const CH5: usize = 48;

const WEIGHT_MAGIC: &[u8; 8] = b"SSMTOY01";
const WEIGHT_FORMAT_VERSION: u32 = 1;

/// Provenance of a set of weights, stored inside the weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainInfo {
    /// Seed the weights were derived from.
    pub seed: u64,
    /// Completed training epochs (0 for a random initialization).
    pub epochs: usize,
    /// Number of distinct training images.
    pub train_images: usize,
    /// Mean training loss over the final epoch, if trained.
    pub final_loss: Option<f64>,
}

impl TrainInfo {
    fn random(seed: u64) -> Self {
        Self { seed, epochs: 0, train_images: 0, final_loss: None }
    }
}

/// All trainable parameters, grouped by layer.
#[derive(Debug, Clone)]
pub(crate) struct ToyParams {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub c3: Conv2d,
    pub c4: Conv2d,
    pub ctx: Dense,
    pub c5: Conv2d,
    pub head: Conv2d,
}

/// Where each layer's weights and biases live inside the flat parameter
/// vector. The bias range always starts where the weight range ends.
#[derive(Debug, Clone)]
pub(crate) struct LayerSpan {
    pub w: Range<usize>,
    pub b: Range<usize>,
}

impl ToyParams {
    fn new_zeroed() -> Self {
        Self {
            c1: Conv2d::new(3, CH1, 3, 1),
            c2: Conv2d::new(CH1, CH2, 3, 1),
            c3: Conv2d::new(CH2, CH3, 3, 1),
            c4: Conv2d::new(CH3, CH4, 3, 2),
            ctx: Dense::new(CH4, CH4),
            c5: Conv2d::new(CH4, CH5, 3, 1),
            head: Conv2d::new(CH5, HEAD_CHANNELS, 3, 1),
        }
    }

    fn init_he(&mut self, rng: &mut ChaCha8Rng) {
        self.c1.init_he(rng);
        self.c2.init_he(rng);
        self.c3.init_he(rng);
        self.c4.init_he(rng);
        self.ctx.init_he(rng);
        self.c5.init_he(rng);
        self.head.init_he(rng);
        // Temper the head: small weights keep initial offsets near zero
        // (decoded boxes start at their anchors) and a positive background
        // logit starts every candidate leaning towards background.
        for w in &mut self.head.weight {
            *w *= 0.1;
        }
        for a in 0..ANCHORS_PER_CELL {
            self.head.bias[a * ANCHOR_BLOCK] = 1.0;
        }
    }

    pub(crate) fn param_count(&self) -> usize {
        self.c1.param_count()
            + self.c2.param_count()
            + self.c3.param_count()
            + self.c4.param_count()
            + self.ctx.param_count()
            + self.c5.param_count()
            + self.head.param_count()
    }

    /// Layer order used everywhere a flat parameter vector appears.
    fn flat_views(&self) -> [(&[f64], &[f64]); 7] {
        [
            (&self.c1.weight, &self.c1.bias),
            (&self.c2.weight, &self.c2.bias),
            (&self.c3.weight, &self.c3.bias),
            (&self.c4.weight, &self.c4.bias),
            (&self.ctx.weight, &self.ctx.bias),
            (&self.c5.weight, &self.c5.bias),
            (&self.head.weight, &self.head.bias),
        ]
    }

    fn flat_views_mut(&mut self) -> [(&mut Vec<f64>, &mut Vec<f64>); 7] {
        [
            (&mut self.c1.weight, &mut self.c1.bias),
            (&mut self.c2.weight, &mut self.c2.bias),
            (&mut self.c3.weight, &mut self.c3.bias),
            (&mut self.c4.weight, &mut self.c4.bias),
            (&mut self.ctx.weight, &mut self.ctx.bias),
            (&mut self.c5.weight, &mut self.c5.bias),
            (&mut self.head.weight, &mut self.head.bias),
        ]
    }

    /// Spans of each layer inside the flat vector, in layer order.
    pub(crate) fn layout(&self) -> Vec<LayerSpan> {
        let mut spans = Vec::with_capacity(7);
        let mut off = 0;
        for (w, b) in self.flat_views() {
            let ws = off..off + w.len();
            off += w.len();
            let bs = off..off + b.len();
            off += b.len();
            spans.push(LayerSpan { w: ws, b: bs });
        }
        spans
    }

    pub(crate) fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in self.flat_views() {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat
    }

    pub(crate) fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(BgError::WeightFormat(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (w, b) in self.flat_views_mut() {
            let wl = w.len();
            w.copy_from_slice(&flat[off..off + wl]);
            off += wl;
            let bl = b.len();
            b.copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
        Ok(())
    }
}

/// Flat parameter-gradient accumulator matching [`ToyParams::layout`].
#[derive(Debug, Clone)]
pub(crate) struct ToyGrads {
    pub flat: Vec<f64>,
}

impl ToyGrads {
    pub(crate) fn zeros(param_count: usize) -> Self {
        Self { flat: vec![0.0; param_count] }
    }

    /// Mutable weight/bias slices for one layer span.
    fn wb(&mut self, span: &LayerSpan) -> (&mut [f64], &mut [f64]) {
        debug_assert_eq!(span.w.end, span.b.start);
        let view = &mut self.flat[span.w.start..span.b.end];
        view.split_at_mut(span.w.end - span.w.start)
    }

    pub(crate) fn add_scaled(&mut self, other: &ToyGrads, scale: f64) {
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += scale * b;
        }
    }
}

/// Intermediate activations kept from a forward pass so the backward pass
/// can run without recomputation; `win*` are the pooling winner indices.
pub(crate) struct ForwardCache {
    x: Tensor3,
    pre1: Tensor3,
    pool1: Tensor3,
    win1: Vec<u32>,
    pre2: Tensor3,
    pool2: Tensor3,
    win2: Vec<u32>,
    pre3: Tensor3,
    pool3: Tensor3,
    win3: Vec<u32>,
    pre4: Tensor3,
    gap: Vec<f64>,
    fused: Tensor3,
    pre5: Tensor3,
    act5: Tensor3,
}

/// The bundled single-shot detector.
pub struct ToyDetector {
    meta: DetectorMetadata,
    anchors: Vec<BoxCwh>,
    params: ToyParams,
    train_info: TrainInfo,
}

impl ToyDetector {
    /// A freshly He-initialized, untrained detector. Offsets start near
    /// zero and every candidate leans towards background.
    pub fn random_init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ToyParams::new_zeroed();
        params.init_he(&mut rng);
        Self::from_parts(params, TrainInfo::random(seed))
    }

    pub(crate) fn from_parts(params: ToyParams, train_info: TrainInfo) -> Self {
        let meta = DetectorMetadata::new(
            NUM_OBJECT_CLASSES,
            StageKind::SingleStage,
            INPUT_SIZE,
            INPUT_SIZE,
        )
        .expect("fixed architecture metadata is valid");
        let mut anchors = Vec::with_capacity(NUM_DETECTIONS);
        for gy in 0..GRID {
            for gx in 0..GRID {
                for size in ANCHOR_SIZES {
                    let cx = (gx * STRIDE) as f64 + STRIDE as f64 / 2.0;
                    let cy = (gy * STRIDE) as f64 + STRIDE as f64 / 2.0;
                    anchors.push(BoxCwh::new(cx, cy, size, size).expect("anchor is valid"));
                }
            }
        }
        Self { meta, anchors, params, train_info }
    }

    /// Anchor boxes in detection order.
    pub fn anchors(&self) -> &[BoxCwh] {
        &self.anchors
    }

    /// How these weights came to be.
    pub fn train_info(&self) -> &TrainInfo {
        &self.train_info
    }

    pub(crate) fn params(&self) -> &ToyParams {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ToyParams {
        &mut self.params
    }

    pub(crate) fn set_train_info(&mut self, info: TrainInfo) {
        self.train_info = info;
    }

    fn check_input(&self, img: &ImageBuffer) -> Result<()> {
        if img.height() != INPUT_SIZE || img.width() != INPUT_SIZE {
            return Err(BgError::ShapeMismatch(format!(
                "detector expects {INPUT_SIZE}x{INPUT_SIZE} input, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    fn normalize(img: &ImageBuffer) -> Tensor3 {
        let px = img.pixels();
        let mut x = Tensor3::zeros(3, INPUT_SIZE, INPUT_SIZE);
        for c in 0..3 {
            for y in 0..INPUT_SIZE {
                let row = x.row_mut(c, y);
                for (xi, v) in row.iter_mut().enumerate() {
                    *v = (px[[y, xi, c]] - PIXEL_SCALE) / PIXEL_SCALE;
                }
            }
        }
        x
    }

    /// Forward pass keeping every intermediate needed for backprop.
    pub(crate) fn forward_cached(&self, img: &ImageBuffer) -> Result<(SsmOutputs, ForwardCache)> {
        self.check_input(img)?;
        let p = &self.params;
        let x = Self::normalize(img);

        let pre1 = p.c1.forward(&x);
        let act1 = softplus_forward(&pre1);
        let (pool1, win1) = maxpool2_forward(&act1);

        let pre2 = p.c2.forward(&pool1);
        let act2 = softplus_forward(&pre2);
        let (pool2, win2) = maxpool2_forward(&act2);

        let pre3 = p.c3.forward(&pool2);
        let act3 = softplus_forward(&pre3);
        let (pool3, win3) = maxpool2_forward(&act3);

        let pre4 = p.c4.forward(&pool3);
        let act4 = softplus_forward(&pre4);

        let gap = global_avg_pool(&act4);
        let ctx_out = p.ctx.forward(&gap);
        let mut fused = act4;
        for c in 0..fused.c {
            let add = ctx_out[c];
            for y in 0..fused.h {
                for v in fused.row_mut(c, y) {
                    *v += add;
                }
            }
        }

        let pre5 = p.c5.forward(&fused);
        let act5 = softplus_forward(&pre5);
        let head = p.head.forward(&act5);

        let outputs = self.head_to_outputs(&head);
        let cache = ForwardCache {
            x,
            pre1,
            pool1,
            win1,
            pre2,
            pool2,
            win2,
            pre3,
            pool3,
            win3,
            pre4,
            gap,
            fused,
            pre5,
            act5,
        };
        Ok((outputs, cache))
    }

    /// Converts raw head activations into detection records; index order is
    /// `(grid_y, grid_x, anchor)`.
    fn head_to_outputs(&self, head: &Tensor3) -> SsmOutputs {
        let mut detections = Vec::with_capacity(NUM_DETECTIONS);
        for gy in 0..GRID {
            for gx in 0..GRID {
                for a in 0..ANCHORS_PER_CELL {
                    let base = a * ANCHOR_BLOCK;
                    let logits: Vec<f64> =
                        (0..NUM_SCORES).map(|k| head.at(base + k, gy, gx)).collect();
                    let scores = softmax(&logits);
                    let offsets = [
                        head.at(base + NUM_SCORES, gy, gx),
                        head.at(base + NUM_SCORES + 1, gy, gx),
                        head.at(base + NUM_SCORES + 2, gy, gx),
                        head.at(base + NUM_SCORES + 3, gy, gx),
                    ];
                    let j = (gy * GRID + gx) * ANCHORS_PER_CELL + a;
                    detections.push(DetectionRecord::from_prediction(
                        scores,
                        self.anchors[j],
                        offsets,
                    ));
                }
            }
        }
        SsmOutputs { detections, source_image_id: None }
    }

    /// Maps loss gradients on scores/offsets back onto the raw head tensor,
    /// which includes pushing score gradients through each softmax.
    pub(crate) fn head_gradient(&self, out: &SsmOutputs, og: &OutputGradients) -> Tensor3 {
        let mut dhead = Tensor3::zeros(HEAD_CHANNELS, GRID, GRID);
        for gy in 0..GRID {
            for gx in 0..GRID {
                for a in 0..ANCHORS_PER_CELL {
                    let j = (gy * GRID + gx) * ANCHORS_PER_CELL + a;
                    let base = a * ANCHOR_BLOCK;
                    let dlogits =
                        softmax_backward(&out.detections[j].scores, &og.d_scores[j]);
                    for (k, dl) in dlogits.iter().enumerate() {
                        dhead.set(base + k, gy, gx, *dl);
                    }
                    for k in 0..4 {
                        dhead.set(base + NUM_SCORES + k, gy, gx, og.d_offsets[j][k]);
                    }
                }
            }
        }
        dhead
    }

    /// Shared backward pass. Accumulates parameter gradients into
    /// `param_grads` when given, and returns the gradient with respect to
    /// the normalized input when `want_input_grad` is set.
    pub(crate) fn backprop(
        &self,
        cache: &ForwardCache,
        dhead: &Tensor3,
        mut param_grads: Option<&mut ToyGrads>,
        want_input_grad: bool,
    ) -> Option<Tensor3> {
        let p = &self.params;
        let layout = p.layout();

        if let Some(g) = param_grads.as_deref_mut() {
            let (dw, db) = g.wb(&layout[6]);
            p.head.accumulate_param_grads(&cache.act5, dhead, dw, db);
        }
        let dact5 = p.head.backward_input(dhead);
        let dpre5 = softplus_backward(&cache.pre5, &dact5);

        if let Some(g) = param_grads.as_deref_mut() {
            let (dw, db) = g.wb(&layout[5]);
            p.c5.accumulate_param_grads(&cache.fused, &dpre5, dw, db);
        }
        let dfused = p.c5.backward_input(&dpre5);

        // fused = act4 + broadcast(ctx(gap(act4))): act4 receives gradient
        // both directly and through the context branch.
        let mut dctx = vec![0.0; dfused.c];
        for (c, dv) in dctx.iter_mut().enumerate() {
            for y in 0..dfused.h {
                for v in dfused.row(c, y) {
                    *dv += v;
                }
            }
        }
        if let Some(g) = param_grads.as_deref_mut() {
            let (dw, db) = g.wb(&layout[4]);
            p.ctx.accumulate_param_grads(&cache.gap, &dctx, dw, db);
        }
        let dgap = p.ctx.backward_input(&dctx);
        let mut dact4 = dfused;
        let inv_area = 1.0 / (dact4.h * dact4.w) as f64;
        for c in 0..dact4.c {
            let add = dgap[c] * inv_area;
            for y in 0..dact4.h {
                for v in dact4.row_mut(c, y) {
                    *v += add;
                }
            }
        }
        let dpre4 = softplus_backward(&cache.pre4, &dact4);

        if let Some(g) = param_grads.as_deref_mut() {
            let (dw, db) = g.wb(&layout[3]);
            p.c4.accumulate_param_grads(&cache.pool3, &dpre4, dw, db);
        }
        let dpool3 = p.c4.backward_input(&dpre4);
        let dact3 = maxpool2_backward(&dpool3, &cache.win3, cache.pre3.h, cache.pre3.w);
        let dpre3 = softplus_backward(&cache.pre3, &dact3);

        if let Some(g) = param_grads.as_deref_mut() {
            let (dw, db) = g.wb(&layout[2]);
            p.c3.accumulate_param_grads(&cache.pool2, &dpre3, dw, db);
        }
        let dpool2 = p.c3.backward_input(&dpre3);
        let dact2 = maxpool2_backward(&dpool2, &cache.win2, cache.pre2.h, cache.pre2.w);
        let dpre2 = softplus_backward(&cache.pre2, &dact2);

        if let Some(g) = param_grads.as_deref_mut() {
            let (dw, db) = g.wb(&layout[1]);
            p.c2.accumulate_param_grads(&cache.pool1, &dpre2, dw, db);
        }
        let dpool1 = p.c2.backward_input(&dpre2);
        let dact1 = maxpool2_backward(&dpool1, &cache.win1, cache.pre1.h, cache.pre1.w);
        let dpre1 = softplus_backward(&cache.pre1, &dact1);

        if let Some(g) = param_grads.as_deref_mut() {
            let (dw, db) = g.wb(&layout[0]);
            p.c1.accumulate_param_grads(&cache.x, &dpre1, dw, db);
        }
        if want_input_grad {
            Some(p.c1.backward_input(&dpre1))
        } else {
            None
        }
    }

    /// Serializes the weights: magic, version, a JSON architecture header,
    /// then every parameter as little-endian `f64` in layer order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = WeightHeader {
            format_version: WEIGHT_FORMAT_VERSION,
            input_size: INPUT_SIZE,
            grid: GRID,
            stride: STRIDE,
            anchor_sizes: ANCHOR_SIZES.to_vec(),
            num_object_classes: NUM_OBJECT_CLASSES,
            channels: vec![CH1, CH2, CH3, CH4, CH5],
            param_count: self.params.param_count(),
            train: self.train_info.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let flat = self.params.to_flat();
        let mut bytes =
            Vec::with_capacity(8 + 4 + header_json.len() + flat.len() * 8);
        bytes.extend_from_slice(WEIGHT_MAGIC);
        bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for v in &flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Loads weights written by [`ToyDetector::save`], rejecting files whose
    /// architecture header does not match this build.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 12 || &bytes[..8] != WEIGHT_MAGIC {
            return Err(BgError::WeightFormat("bad magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12 + header_len;
        if bytes.len() < header_end {
            return Err(BgError::WeightFormat("truncated header".into()));
        }
        let header: WeightHeader = serde_json::from_slice(&bytes[12..header_end])?;
        let mut params = ToyParams::new_zeroed();
        let expected = ExpectedHeader {
            format_version: WEIGHT_FORMAT_VERSION,
            input_size: INPUT_SIZE,
            grid: GRID,
            stride: STRIDE,
            anchor_sizes: ANCHOR_SIZES.to_vec(),
            num_object_classes: NUM_OBJECT_CLASSES,
            channels: vec![CH1, CH2, CH3, CH4, CH5],
            param_count: params.param_count(),
        };
        expected.check(&header)?;
        let body = &bytes[header_end..];
        if body.len() != header.param_count * 8 {
            return Err(BgError::WeightFormat(format!(
                "expected {} parameter bytes, got {}",
                header.param_count * 8,
                body.len()
            )));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(BgError::WeightFormat("non-finite parameter value".into()));
        }
        params.assign_from_flat(&flat)?;
        Ok(Self::from_parts(params, header.train))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    format_version: u32,
    input_size: usize,
    grid: usize,
    stride: usize,
    anchor_sizes: Vec<f64>,
    num_object_classes: usize,
    channels: Vec<usize>,
    param_count: usize,
    train: TrainInfo,
}

struct ExpectedHeader {
    format_version: u32,
    input_size: usize,
    grid: usize,
    stride: usize,
    anchor_sizes: Vec<f64>,
    num_object_classes: usize,
    channels: Vec<usize>,
    param_count: usize,
}

impl ExpectedHeader {
    fn check(&self, got: &WeightHeader) -> Result<()> {
        let mismatch = |what: &str| -> Result<()> {
            Err(BgError::WeightFormat(format!("architecture mismatch: {what}")))
        };
        if got.format_version != self.format_version {
            return mismatch("format_version");
        }
        if got.input_size != self.input_size {
            return mismatch("input_size");
        }
        if got.grid != self.grid || got.stride != self.stride {
            return mismatch("grid/stride");
        }
        if got.anchor_sizes != self.anchor_sizes {
            return mismatch("anchor_sizes");
        }
        if got.num_object_classes != self.num_object_classes {
            return mismatch("num_object_classes");
        }
        if got.channels != self.channels {
            return mismatch("channels");
        }
        if got.param_count != self.param_count {
            return mismatch("param_count");
        }
        Ok(())
    }
}

impl SingleShotDetector for ToyDetector {
    fn metadata(&self) -> &DetectorMetadata {
        &self.meta
    }

    fn forward(&self, img: &ImageBuffer) -> Result<SsmOutputs> {
        self.forward_cached(img).map(|(out, _)| out)
    }

    fn input_gradient(
        &self,
        img: &ImageBuffer,
        gt: &GroundTruth,
        patches: &PatchSet,
        weights: &LossWeights,
    ) -> Result<InputGradient> {
        let (out, cache) = self.forward_cached(img)?;
        let (breakdown, og) =
            loss_output_gradients(&out, gt, patches, weights, NUM_OBJECT_CLASSES)?;
        if no_active_loss(weights, &breakdown) {
            return Err(BgError::NoActiveLoss);
        }
        let dhead = self.head_gradient(&out, &og);
        let dx = self
            .backprop(&cache, &dhead, None, true)
            .expect("input gradient was requested");
        let mut grad = Array3::<f64>::zeros((INPUT_SIZE, INPUT_SIZE, 3));
        for c in 0..3 {
            for y in 0..INPUT_SIZE {
                let row = dx.row(c, y);
                for (x, v) in row.iter().enumerate() {
                    // Chain rule through the input normalization.
                    grad[[y, x, c]] = v / PIXEL_SCALE;
                }
            }
        }
        Ok(InputGradient { grad, breakdown })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::total_loss;
    use crate::patches::Patch;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn test_image(seed: u64) -> (ImageBuffer, GroundTruth) {
        let cfg = synthetic::SyntheticConfig::default();
        synthetic::generate_image(&cfg, seed, 0)
    }

    #[test]
    fn forward_emits_the_fixed_detection_count_with_unit_score_sums() {
        let det = ToyDetector::random_init(1);
        let (img, _) = test_image(10);
        let out = det.forward(&img).unwrap();
        assert_eq!(out.len(), NUM_DETECTIONS);
        for rec in &out.detections {
            let sum: f64 = rec.scores.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            assert!(rec.scores.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn anchors_tile_the_grid_at_both_sizes() {
        let det = ToyDetector::random_init(1);
        let anchors = det.anchors();
        assert_eq!(anchors.len(), NUM_DETECTIONS);
        assert_eq!(anchors[0], BoxCwh::new(4.0, 4.0, 16.0, 16.0).unwrap());
        assert_eq!(anchors[1], BoxCwh::new(4.0, 4.0, 30.0, 30.0).unwrap());
        // Last cell of the first row.
        let j = (GRID - 1) * ANCHORS_PER_CELL;
        assert_eq!(anchors[j].cx, 92.0);
        assert_eq!(anchors[j].cy, 4.0);
    }

    #[test]
    fn untrained_head_starts_near_background_with_boxes_on_anchors() {
        let det = ToyDetector::random_init(3);
        let (img, _) = test_image(11);
        let out = det.forward(&img).unwrap();
        let mut bg_top = 0;
        for (rec, anchor) in out.detections.iter().zip(det.anchors()) {
            if rec.top_class() == 0 {
                bg_top += 1;
            }
            assert!(
                (rec.bbox.cx - anchor.cx).abs() < anchor.w
                    && (rec.bbox.w / anchor.w).ln().abs() < 1.0,
                "initial decoded box strayed far from its anchor"
            );
        }
        assert!(
            bg_top > NUM_DETECTIONS / 2,
            "only {bg_top}/{NUM_DETECTIONS} candidates lean background at init"
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let det = ToyDetector::random_init(5);
        let (img, _) = test_image(12);
        let a = det.forward(&img).unwrap();
        let b = det.forward(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_wrong_input_size() {
        let det = ToyDetector::random_init(1);
        let img = ImageBuffer::filled(48, 96, 0.0).unwrap();
        assert!(matches!(det.forward(&img), Err(BgError::ShapeMismatch(_))));
    }

    #[test]
    fn input_gradient_matches_central_finite_differences() {
        let det = ToyDetector::random_init(7);
        let (img, _) = test_image(13);
        // Ground truth sitting on an anchor center so the untrained
        // detector yields active true positives; a patch far from it
        // yields active false-positive candidates.
        let gt = GroundTruth::new(
            vec![BoxCwh::new(44.0, 44.0, 30.0, 30.0).unwrap()],
            vec![1],
        )
        .unwrap();
        let patches = PatchSet::new(vec![Patch {
            group_id: 0,
            rect: BoxCwh::new(78.0, 78.0, 14.0, 14.0).unwrap(),
        }]);
        let weights = LossWeights::default();

        let ig = det.input_gradient(&img, &gt, &patches, &weights).unwrap();
        assert!(ig.breakdown.active_tp_count > 0, "fixture has no true positives");
        assert!(ig.breakdown.active_fp_count > 0, "fixture has no patch candidates");

        let loss_at = |image: &ImageBuffer| -> f64 {
            let out = det.forward(image).unwrap();
            total_loss(&out, &gt, &patches, &weights, NUM_OBJECT_CLASSES)
                .unwrap()
                .total
        };

        let h = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        for _ in 0..24 {
            let y = rng.gen_range(0..INPUT_SIZE);
            let x = rng.gen_range(0..INPUT_SIZE);
            let c = rng.gen_range(0..3);
            let base = img.pixels()[[y, x, c]];
            if base < 1.0 || base > 254.0 {
                continue;
            }
            let mut plus = img.pixels().clone();
            plus[[y, x, c]] = base + h;
            let mut minus = img.pixels().clone();
            minus[[y, x, c]] = base - h;
            let fd = (loss_at(&ImageBuffer::from_array(plus).unwrap())
                - loss_at(&ImageBuffer::from_array(minus).unwrap()))
                / (2.0 * h);
            let an = ig.grad[[y, x, c]];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((fd - an) / denom).abs() < 1e-4 || (fd - an).abs() < 1e-10,
                "gradient mismatch at ({y},{x},{c}): fd={fd:e} analytic={an:e}"
            );
            checked += 1;
        }
        assert!(checked >= 16, "too few in-range pixels checked ({checked})");
    }

    #[test]
    fn gradient_reaches_pixels_far_from_objects_and_patches() {
        let det = ToyDetector::random_init(9);
        let (img, _) = test_image(14);
        let gt = GroundTruth::new(
            vec![BoxCwh::new(44.0, 44.0, 30.0, 30.0).unwrap()],
            vec![2],
        )
        .unwrap();
        let patches = PatchSet::new(vec![Patch {
            group_id: 0,
            rect: BoxCwh::new(78.0, 78.0, 14.0, 14.0).unwrap(),
        }]);
        let ig = det
            .input_gradient(&img, &gt, &patches, &LossWeights::default())
            .unwrap();
        // The context branch couples all pixels to all detections, so even
        // a far corner must receive a nonzero gradient.
        let corner = ig.grad[[2, 2, 0]];
        assert!(corner != 0.0, "corner pixel gradient is exactly zero");
    }

    #[test]
    fn no_active_loss_surfaces_when_nothing_is_selected() {
        let det = ToyDetector::random_init(4);
        let (img, _) = test_image(15);
        // No candidate box overlaps this tiny corner target by more than a
        // sliver, so the true-positive selection is empty and a TP-only
        // gradient is undefined.
        let gt = GroundTruth::new(
            vec![BoxCwh::new(1.0, 1.0, 1.0, 1.0).unwrap()],
            vec![1],
        )
        .unwrap();
        let patches = PatchSet::empty();
        let err = det
            .input_gradient(&img, &gt, &patches, &LossWeights::tpc_tps())
            .unwrap_err();
        assert!(matches!(err, BgError::NoActiveLoss));
    }

    #[test]
    fn weights_round_trip_through_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.weights");
        let det = ToyDetector::random_init(21);
        det.save(&path).unwrap();
        let loaded = ToyDetector::load(&path).unwrap();
        assert_eq!(det.params.to_flat(), loaded.params.to_flat());
        assert_eq!(det.train_info, loaded.train_info);
        let (img, _) = test_image(16);
        assert_eq!(det.forward(&img).unwrap(), loaded.forward(&img).unwrap());
    }

    #[test]
    fn load_rejects_tampered_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.weights");
        ToyDetector::random_init(22).save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xFF;
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(ToyDetector::load(&path), Err(BgError::WeightFormat(_))));

        let truncated = &good[..good.len() - 16];
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(ToyDetector::load(&path), Err(BgError::WeightFormat(_))));
    }

    #[test]
    fn flat_parameter_round_trip_preserves_layer_structure() {
        let det = ToyDetector::random_init(23);
        let flat = det.params.to_flat();
        assert_eq!(flat.len(), det.params.param_count());
        let mut rebuilt = ToyParams::new_zeroed();
        rebuilt.assign_from_flat(&flat).unwrap();
        assert_eq!(rebuilt.to_flat(), flat);
        // Spans tile the flat vector exactly.
        let layout = det.params.layout();
        assert_eq!(layout[0].w.start, 0);
        for pair in layout.windows(2) {
            assert_eq!(pair[0].b.end, pair[1].w.start);
        }
        assert_eq!(layout.last().unwrap().b.end, flat.len());
    }
}
