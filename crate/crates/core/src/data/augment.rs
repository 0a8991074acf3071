use rand::Rng;

use super::GrayImage;
use crate::attention::{bilinear_plane, BoundingBox};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Train,
    Eval,
}

/// Square resize side `resize` followed by a square crop of side `crop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentSizes {
    pub resize: usize,
    pub crop: usize,
}

impl AugmentSizes {
    /// Sizes used for 64×64 synthetic images.
    pub const DESK: AugmentSizes = AugmentSizes {
        resize: 72,
        crop: 64,
    };
    /// Sizes for full-resolution radiographs.
    pub const REFERENCE: AugmentSizes = AugmentSizes {
        resize: 256,
        crop: 224,
    };

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.resize == 0 {
            return Err(Error::InvalidArgument(
                "augmentation sizes must be positive".into(),
            ));
        }
        if self.crop > self.resize {
            return Err(Error::InvalidArgument(format!(
                "crop size {} exceeds resize size {}",
                self.crop, self.resize
            )));
        }
        Ok(())
    }

    fn center_offset(&self) -> usize {
        (self.resize - self.crop) / 2
    }
}

/// Mean pixel value, in `[0, 1]` units, over a set of images.
pub fn dataset_mean<'a>(images: impl IntoIterator<Item = &'a GrayImage>) -> Result<f64> {
    let (mut sum, mut count) = (0u64, 0u64);
    for img in images {
        sum += img.pixels.iter().map(|&p| u64::from(p)).sum::<u64>();
        count += img.pixels.len() as u64;
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(sum as f64 / count as f64 / 255.0)
}

/// Turns an image into a `[1, crop, crop]` network input.
///
/// Train mode resizes, takes a random crop and flips horizontally with
/// probability one half. Eval mode resizes and takes the centre crop. Both
/// subtract `mean`. Eval mode never touches `rng`.
pub fn augment<R: Rng + ?Sized>(
    image: &GrayImage,
    mode: AugmentMode,
    sizes: AugmentSizes,
    mean: f64,
    rng: &mut R,
) -> Result<Tensor> {
    sizes.validate()?;
    let unit: Vec<f64> = image.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let r = sizes.resize;
    let resized = if image.width == r && image.height == r {
        unit
    } else {
        bilinear_plane(&unit, image.width, image.height, r, r)
    };
    let (ox, oy, flip) = match mode {
        AugmentMode::Eval => (sizes.center_offset(), sizes.center_offset(), false),
        AugmentMode::Train => {
            let span = r - sizes.crop;
            let ox = rng.random_range(0..=span);
            let oy = rng.random_range(0..=span);
            (ox, oy, rng.random_bool(0.5))
        }
    };
    let s = sizes.crop;
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        let row = &resized[(oy + y) * r + ox..(oy + y) * r + ox + s];
        if flip {
            out.extend(row.iter().rev().map(|v| v - mean));
        } else {
            out.extend(row.iter().map(|v| v - mean));
        }
    }
    Tensor::new(vec![1, s, s], out)
}

/// Coordinate mapping between an original image and its eval-mode crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalFrame {
    width: usize,
    height: usize,
    sizes: AugmentSizes,
}

impl EvalFrame {
    pub fn new(width: usize, height: usize, sizes: AugmentSizes) -> Result<Self> {
        sizes.validate()?;
        Ok(EvalFrame {
            width,
            height,
            sizes,
        })
    }

    fn scale(original: usize, resize: usize) -> f64 {
        if original <= 1 || resize <= 1 {
            0.0
        } else {
            (original - 1) as f64 / (resize - 1) as f64
        }
    }

    /// Maps a box given in eval-crop pixels back to original pixels.
    pub fn crop_to_original(&self, b: BoundingBox) -> BoundingBox {
        let off = self.sizes.center_offset() as f64;
        let sx = Self::scale(self.width, self.sizes.resize);
        let sy = Self::scale(self.height, self.sizes.resize);
        let map = |c: usize, s: f64, limit: usize| {
            (((c as f64 + off) * s).round() as usize).min(limit - 1)
        };
        BoundingBox {
            x_min: map(b.x_min, sx, self.width),
            y_min: map(b.y_min, sy, self.height),
            x_max: map(b.x_max, sx, self.width),
            y_max: map(b.y_max, sy, self.height),
        }
    }

    /// Continuous eval-crop coordinates of original pixel `(x, y)`; may lie
    /// outside `[0, crop - 1]` for pixels the crop discards.
    pub fn original_point_to_crop(&self, x: usize, y: usize) -> (f64, f64) {
        let off = self.sizes.center_offset() as f64;
        let inv = |sc: f64| if sc == 0.0 { 0.0 } else { 1.0 / sc };
        let ix = inv(Self::scale(self.width, self.sizes.resize));
        let iy = inv(Self::scale(self.height, self.sizes.resize));
        (x as f64 * ix - off, y as f64 * iy - off)
    }

    /// Maps a box in original pixels into eval-crop pixels, clipping to the
    /// crop. Returns `None` when the box falls entirely outside the crop.
    pub fn original_to_crop(&self, b: BoundingBox) -> Option<BoundingBox> {
        let off = self.sizes.center_offset() as f64;
        let s = self.sizes.crop as f64;
        let inv = |sc: f64| if sc == 0.0 { 0.0 } else { 1.0 / sc };
        let ix = inv(Self::scale(self.width, self.sizes.resize));
        let iy = inv(Self::scale(self.height, self.sizes.resize));
        let lo = |v: usize, k: f64| (v as f64 * k - off).round();
        let (x0, x1) = (lo(b.x_min, ix), lo(b.x_max, ix));
        let (y0, y1) = (lo(b.y_min, iy), lo(b.y_max, iy));
        if x1 < 0.0 || y1 < 0.0 || x0 > s - 1.0 || y0 > s - 1.0 {
            return None;
        }
        let clip = |v: f64| v.clamp(0.0, s - 1.0) as usize;
        Some(BoundingBox {
            x_min: clip(x0),
            y_min: clip(y0),
            x_max: clip(x1),
            y_max: clip(y1),
        })
    }
}
