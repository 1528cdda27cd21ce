//! Procedural dataset of colored shapes on textured backgrounds.
//!
//! Each image contains one to four non-overlapping objects drawn over a
//! muted value-noise background.  The class of an object is carried by both
//! its silhouette and its hue so the bundled detector has an easy, learnable
//! signal:
//!
//! | label | shape     | hue   |
//! |-------|-----------|-------|
//! | 1     | rectangle | red   |
//! | 2     | ellipse   | green |
//! | 3     | diamond   | blue  |
//!
//! Generation is fully deterministic: image `index` under `base_seed` is
//! always the same picture, no matter how many images are generated, in
//! what order, or on how many threads.  All pixel values are integers so a
//! round trip through an 8-bit PNG file is lossless.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::boxes::{box_min_distance, BoxCwh, GroundTruth};
use crate::image::ImageBuffer;

/// Number of object classes produced by the generator.
pub const NUM_CLASSES: usize = 3;

/// Human-readable name for a generator class label (1-based).
pub fn class_name(label: usize) -> &'static str {
    match label {
        1 => "rectangle",
        2 => "ellipse",
        3 => "diamond",
        _ => "unknown",
    }
}

/// Knobs for the shape generator.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Minimum objects per image.
    pub min_objects: usize,
    /// Maximum objects per image.
    pub max_objects: usize,
    /// Smallest object side length in pixels.
    pub min_side: f64,
    /// Largest object side length in pixels.
    pub max_side: f64,
    /// Minimum distance from any object box to the image border.
    pub margin: f64,
    /// Minimum gap between the boxes of two objects in the same image.
    pub min_gap: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            min_objects: 1,
            max_objects: 4,
            min_side: 14.0,
            max_side: 34.0,
            margin: 2.0,
            min_gap: 2.0,
        }
    }
}

/// Smoothstep-interpolated lattice noise in `[-amp, amp]`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize, amp: f64) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-amp..amp)).collect();
    let mut out = vec![0.0; size * size];
    let scale = cells as f64 / size as f64;
    for y in 0..size {
        let v = (y as f64 + 0.5) * scale;
        let iy = (v.floor() as usize).min(cells - 1);
        let ty = v - iy as f64;
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..size {
            let u = (x as f64 + 0.5) * scale;
            let ix = (u.floor() as usize).min(cells - 1);
            let tx = u - ix as f64;
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let a = lattice[iy * n + ix];
            let b = lattice[iy * n + ix + 1];
            let c = lattice[(iy + 1) * n + ix];
            let d = lattice[(iy + 1) * n + ix + 1];
            let top = a + (b - a) * sx;
            let bot = c + (d - c) * sx;
            out[y * size + x] = top + (bot - top) * sy;
        }
    }
    out
}

/// True when the center of pixel `(px, py)` lies inside the class shape
/// inscribed in `rect`.
fn inside_shape(label: usize, rect: &BoxCwh, px: f64, py: f64) -> bool {
    let nx = (px - rect.cx) / (rect.w / 2.0);
    let ny = (py - rect.cy) / (rect.h / 2.0);
    match label {
        1 => nx.abs() <= 1.0 && ny.abs() <= 1.0,
        2 => nx * nx + ny * ny <= 1.0,
        3 => nx.abs() + ny.abs() <= 1.0,
        _ => unreachable!("labels are always 1..=3 here"),
    }
}

/// Base fill color for a class, sampled within that class's hue family.
fn class_color(label: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hi = rng.gen_range(150.0..230.0);
    let lo_a = rng.gen_range(25.0..85.0);
    let lo_b = rng.gen_range(25.0..85.0);
    match label {
        1 => [hi, lo_a, lo_b],
        2 => [lo_a, hi, lo_b],
        3 => [lo_a, lo_b, hi],
        _ => unreachable!("labels are always 1..=3 here"),
    }
}

/// Generates image `index` of the virtual dataset rooted at `base_seed`.
pub fn generate_image(
    cfg: &SyntheticConfig,
    base_seed: u64,
    index: u64,
) -> (ImageBuffer, GroundTruth) {
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index.wrapping_add(1));

    // Muted background: a per-channel base tone plus two octaves of noise.
    let base_gray = rng.gen_range(70.0..180.0);
    let chan_offset: [f64; 3] = [
        rng.gen_range(-12.0..12.0),
        rng.gen_range(-12.0..12.0),
        rng.gen_range(-12.0..12.0),
    ];
    let coarse_amp = rng.gen_range(10.0..28.0);
    let coarse = value_noise(&mut rng, size, 4, coarse_amp);
    let fine = value_noise(&mut rng, size, 12, coarse_amp * 0.5);

    let mut data = Array3::<f64>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let tex = coarse[y * size + x] + fine[y * size + x];
            for ch in 0..3 {
                let v = (base_gray + chan_offset[ch] + tex).round().clamp(0.0, 255.0);
                data[[y, x, ch]] = v;
            }
        }
    }

    // Place objects by rejection sampling; an image keeps fewer objects
    // than requested only if placement repeatedly fails.
    let want = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<BoxCwh> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for _ in 0..want {
        let mut placed = None;
        for _ in 0..60 {
            let base = rng.gen_range(cfg.min_side..(cfg.max_side - 3.0));
            let aspect = rng.gen_range(0.72f64..1.38);
            let w = (base * aspect.sqrt()).clamp(cfg.min_side, cfg.max_side);
            let h = (base / aspect.sqrt()).clamp(cfg.min_side, cfg.max_side);
            let half_w = w / 2.0;
            let half_h = h / 2.0;
            let cx = rng.gen_range((cfg.margin + half_w)..(size as f64 - cfg.margin - half_w));
            let cy = rng.gen_range((cfg.margin + half_h)..(size as f64 - cfg.margin - half_h));
            let cand = BoxCwh::new(cx, cy, w, h).expect("sampled box is valid");
            if boxes.iter().all(|b| box_min_distance(b, &cand) >= cfg.min_gap) {
                placed = Some(cand);
                break;
            }
        }
        let Some(rect) = placed else { break };
        let label = rng.gen_range(1..=NUM_CLASSES);
        let color = class_color(label, &mut rng);
        let (x1, y1, x2, y2) = rect.corners();
        let ys = y1.floor().max(0.0) as usize..(y2.ceil() as usize).min(size);
        let xs = x1.floor().max(0.0) as usize..(x2.ceil() as usize).min(size);
        for y in ys {
            for x in xs.clone() {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                if inside_shape(label, &rect, px, py) {
                    for ch in 0..3 {
                        let v = (color[ch] + rng.gen_range(-8.0..8.0)).round().clamp(0.0, 255.0);
                        data[[y, x, ch]] = v;
                    }
                }
            }
        }
        boxes.push(rect);
        labels.push(label);
    }

    let image = ImageBuffer::from_array(data).expect("generated pixels are in range");
    let gt = GroundTruth::new(boxes, labels).expect("generated annotations are valid");
    (image, gt)
}

/// Generates images `0..count` in parallel; output order is by index.
pub fn generate_dataset(
    cfg: &SyntheticConfig,
    base_seed: u64,
    count: usize,
) -> Vec<(ImageBuffer, GroundTruth)> {
    generate_range(cfg, base_seed, 0, count)
}

/// Generates images `start..start + count` in parallel. Index ranges that
/// never overlap the training range act as held-out data.
pub fn generate_range(
    cfg: &SyntheticConfig,
    base_seed: u64,
    start: u64,
    count: usize,
) -> Vec<(ImageBuffer, GroundTruth)> {
    (start..start + count as u64)
        .into_par_iter()
        .map(|i| generate_image(cfg, base_seed, i))
        .collect()
}
