//! Real-valued RGB image buffers and the masked clipped update applied by
//! the attack loop.
//!
//! Pixels are stored as `f64` in `[0, 255]` with shape `(height, width, 3)`.
//! Working in real values matters: the optimizer applies fractional updates,
//! and quantizing between iterations would destroy them. File output uses
//! 16-bit PNG (lossless, 1/257-level precision) via [`ImageBuffer::save_png16`];
//! ordinary 8-bit PNGs can be read and written for integer-valued content.

use std::path::Path;

use ndarray::{Array3, Zip};

use crate::error::{BgError, Result};
use crate::mask::PixelMask;

/// RGB image with `f64` pixels in `[0, 255]`, laid out `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    data: Array3<f64>,
}

impl ImageBuffer {
    /// Wraps an `(H, W, 3)` array, validating range and shape.
    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(BgError::ShapeMismatch(format!(
                "expected (H, W, 3) with H, W > 0, got ({h}, {w}, {c})"
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=255.0).contains(v)) {
            return Err(BgError::InvalidArgument(
                "pixel values must be finite and within [0, 255]".into(),
            ));
        }
        Ok(Self { data })
    }

    /// Constant-valued image.
    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_array(Array3::from_elem((height, width, 3), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Read-only pixel access, `(H, W, 3)`.
    pub fn pixels(&self) -> &Array3<f64> {
        &self.data
    }

    /// Consumes the buffer, returning the raw array.
    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    /// Reads an 8- or 16-bit RGB(A) PNG. 16-bit samples are scaled by 1/257
    /// so both depths land in `[0, 255]` (the inverse of [`save_png16`]).
    ///
    /// [`save_png16`]: ImageBuffer::save_png16
    pub fn load_png(path: &Path) -> Result<Self> {
        let dyn_img = image::open(path)?;
        let (w, h) = (dyn_img.width() as usize, dyn_img.height() as usize);
        let mut data = Array3::zeros((h, w, 3));
        match dyn_img {
            image::DynamicImage::ImageRgb16(img) => {
                for (x, y, p) in img.enumerate_pixels() {
                    for c in 0..3 {
                        data[[y as usize, x as usize, c]] = p.0[c] as f64 / 257.0;
                    }
                }
            }
            image::DynamicImage::ImageRgba16(img) => {
                for (x, y, p) in img.enumerate_pixels() {
                    for c in 0..3 {
                        data[[y as usize, x as usize, c]] = p.0[c] as f64 / 257.0;
                    }
                }
            }
            other => {
                let rgb = other.to_rgb8();
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        data[[y as usize, x as usize, c]] = p.0[c] as f64;
                    }
                }
            }
        }
        Self::from_array(data)
    }

    /// Writes a 16-bit RGB PNG; sample = round(pixel × 257), so integer
    /// pixel values round-trip exactly and fractional values survive at
    /// 1/257-level precision.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let (h, w, _) = self.data.dim();
        let mut out = image::ImageBuffer::<image::Rgb<u16>, _>::new(w as u32, h as u32);
        for (x, y, p) in out.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = (self.data[[y as usize, x as usize, c]] * 257.0).round();
                p.0[c] = v.clamp(0.0, 65535.0) as u16;
            }
        }
        out.save(path)?;
        Ok(())
    }

    /// Writes an 8-bit RGB PNG with rounded samples. Intended for
    /// integer-valued content (e.g. dataset images); fractional values are
    /// rounded.
    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let (h, w, _) = self.data.dim();
        let mut out = image::ImageBuffer::<image::Rgb<u8>, _>::new(w as u32, h as u32);
        for (x, y, p) in out.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.data[[y as usize, x as usize, c]].round();
                p.0[c] = v.clamp(0.0, 255.0) as u8;
            }
        }
        out.save(path)?;
        Ok(())
    }
}

/// Applies `clip(old - delta, 0, 255)` at masked pixels, leaving the rest
/// untouched. `delta` must be `(H, W, 3)` matching the image and mask.
pub fn masked_update(img: &ImageBuffer, delta: &Array3<f64>, mask: &PixelMask) -> Result<ImageBuffer> {
    let dims = img.pixels().dim();
    if delta.dim() != dims {
        return Err(BgError::ShapeMismatch(format!(
            "delta shape {:?} vs image shape {:?}",
            delta.dim(),
            dims
        )));
    }
    if mask.height() != dims.0 || mask.width() != dims.1 {
        return Err(BgError::ShapeMismatch(format!(
            "mask shape ({}, {}) vs image shape {:?}",
            mask.height(),
            mask.width(),
            dims
        )));
    }
    let mut out = img.pixels().clone();
    Zip::indexed(&mut out).and(delta).for_each(|(y, x, _), o, d| {
        if mask.get(y, x) {
            *o = (*o - d).clamp(0.0, 255.0);
        }
    });
    Ok(ImageBuffer { data: out })
}
