//! Mask inference: from the global branch's last convolutional features to
//! a cropped, resized local image.
//!
//! The pipeline is
//! [`compute_heatmap`] → [`normalize_heatmap`] → [`resize_bilinear`] (to the
//! image size) → [`threshold_mask`] → [`largest_connected_region`] →
//! [`crop_and_resize`], composed by [`infer_local_region`].
//!
//! Thresholding happens on the min-max normalized, image-sized heat map, so
//! `tau` is scale-free and the mask shares the image's pixel frame.

mod regions;
mod resize;

use std::fmt;
use std::str::FromStr;

pub use regions::{connected_components, select_largest, Component};
pub(crate) use resize::bilinear_plane;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// Default attention threshold.
pub const DEFAULT_TAU: f64 = 0.7;

/// Smallest crop side, in image pixels, after box expansion.
pub const MIN_CROP: usize = 8;

/// Channel statistic used to collapse `K` feature maps into one heat map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum HeatStat {
    /// `max_k |f_k|`
    #[default]
    MaxAbs,
    /// `(1/K) Σ_k |f_k|`
    L1,
    /// `(1/K) sqrt(Σ_k f_k²)`
    L2,
}

impl HeatStat {
    pub const ALL: [HeatStat; 3] = [HeatStat::MaxAbs, HeatStat::L1, HeatStat::L2];

    pub fn as_str(self) -> &'static str {
        match self {
            HeatStat::MaxAbs => "max",
            HeatStat::L1 => "l1",
            HeatStat::L2 => "l2",
        }
    }
}

impl fmt::Display for HeatStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeatStat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" | "maxabs" => Ok(HeatStat::MaxAbs),
            "l1" => Ok(HeatStat::L1),
            "l2" => Ok(HeatStat::L2),
            _ => Err(Error::Config(format!(
                "unknown heat-map statistic {s:?} (expected max, l1 or l2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `width * height` entries, all `>= 0`.
    pub values: Vec<f64>,
    pub normalized: bool,
    pub source_stat: HeatStat,
}

impl HeatMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Position of the first maximum in scan order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::InvalidArgument(format!(
                "bounding box ({x_min},{y_min})-({x_max},{y_max}) has negative extent"
            )));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        BoundingBox {
            x_min: 0,
            y_min: 0,
            x_max: width - 1,
            y_max: height - 1,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_max < width && self.y_max < height
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let x0 = self.x_min.max(other.x_min);
        let x1 = self.x_max.min(other.x_max);
        let y0 = self.y_min.max(other.y_min);
        let y1 = self.y_max.min(other.y_max);
        if x0 > x1 || y0 > y1 {
            0
        } else {
            (x1 - x0 + 1) * (y1 - y0 + 1)
        }
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        inter as f64 / (self.area() + other.area() - inter) as f64
    }

    /// Grows the box symmetrically until each side spans at least `min`
    /// pixels (or the whole image), shifting it back inside the image when
    /// the growth crosses a border.
    pub fn expand_to_min(&self, min: usize, width: usize, height: usize) -> BoundingBox {
        fn grow(lo: usize, hi: usize, min: usize, len: usize) -> (usize, usize) {
            let target = min.min(len);
            let span = hi - lo + 1;
            if span >= target {
                return (lo, hi);
            }
            let deficit = target - span;
            let before = deficit / 2;
            let mut new_lo = lo as isize - before as isize;
            let mut new_hi = hi as isize + (deficit - before) as isize;
            if new_lo < 0 {
                new_hi -= new_lo;
                new_lo = 0;
            }
            if new_hi >= len as isize {
                new_lo -= new_hi - (len as isize - 1);
                new_hi = len as isize - 1;
            }
            (new_lo.max(0) as usize, new_hi as usize)
        }
        let (x_min, x_max) = grow(self.x_min, self.x_max, min, width);
        let (y_min, y_max) = grow(self.y_min, self.y_max, min, height);
        BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Collapses `features` (`[1, K, h, w]`) into an unnormalized heat map.
pub fn compute_heatmap(features: &Tensor, stat: HeatStat) -> Result<HeatMap> {
    let shape = features.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            "compute_heatmap",
            "features",
            format!("expected [1,K,h,w], got {shape:?}"),
        ));
    }
    if shape[0] != 1 {
        return Err(Error::shape(
            "compute_heatmap",
            "N",
            format!("mask inference is per image, got batch of {}", shape[0]),
        ));
    }
    let (k, h, w) = (shape[1], shape[2], shape[3]);
    let plane = h * w;
    let f = features.values();
    let values = (0..plane)
        .map(|p| {
            let channel = (0..k).map(|c| f[c * plane + p]);
            match stat {
                HeatStat::MaxAbs => channel.map(f64::abs).fold(0.0, f64::max),
                HeatStat::L1 => channel.map(f64::abs).sum::<f64>() / k as f64,
                HeatStat::L2 => channel.map(|v| v * v).sum::<f64>().sqrt() / k as f64,
            }
        })
        .collect();
    Ok(HeatMap {
        width: w,
        height: h,
        values,
        normalized: false,
        source_stat: stat,
    })
}

/// Min-max rescale to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_heatmap(heat: &HeatMap) -> HeatMap {
    let min = heat.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = heat
        .values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let values = if range > 0.0 {
        heat.values
            .iter()
            .map(|&v| ((v - min) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; heat.values.len()]
    };
    HeatMap {
        values,
        normalized: true,
        ..heat.clone()
    }
}

pub fn resize_bilinear(heat: &HeatMap, target_w: usize, target_h: usize) -> Result<HeatMap> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {target_w}x{target_h} must be at least 1x1"
        )));
    }
    Ok(HeatMap {
        width: target_w,
        height: target_h,
        values: bilinear_plane(&heat.values, heat.width, heat.height, target_w, target_h),
        normalized: heat.normalized,
        source_stat: heat.source_stat,
    })
}

/// Bit is set iff the heat value is strictly greater than `tau`.
pub fn threshold_mask(heat: &HeatMap, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "tau must lie in [0,1], got {tau}"
        )));
    }
    if !heat.normalized {
        return Err(Error::InvalidArgument(
            "threshold_mask needs a normalized heat map".into(),
        ));
    }
    Ok(BinaryMask {
        width: heat.width,
        height: heat.height,
        bits: heat.values.iter().map(|&v| v > tau).collect(),
    })
}

/// Bounding box of the largest 8-connected component, or `None` when no bit
/// is set. Size ties are broken by earliest origin in scan order.
pub fn largest_connected_region(mask: &BinaryMask) -> Option<BoundingBox> {
    largest_connected_region_weighted(mask, None)
}

/// As [`largest_connected_region`], but size ties go first to the component
/// with the larger summed heat value.
pub fn largest_connected_region_weighted(
    mask: &BinaryMask,
    heat: Option<&HeatMap>,
) -> Option<BoundingBox> {
    let components = connected_components(mask, heat);
    select_largest(&components).map(|c| c.bbox)
}

/// Crops the inclusive `bbox` from a `[C, H, W]` image and resizes it to
/// `out_h × out_w` with corner-aligned bilinear sampling.
pub fn crop_and_resize(
    image: &Tensor,
    bbox: BoundingBox,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape(
            "crop_and_resize",
            "image",
            format!("expected [C,H,W], got {shape:?}"),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if !bbox.fits(w, h) {
        return Err(Error::InvalidArgument(format!(
            "box {bbox} lies outside the {w}x{h} image"
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "crop output must be at least 1x1".into(),
        ));
    }
    let (bw, bh) = (bbox.width(), bbox.height());
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut region = Vec::with_capacity(bw * bh);
    for ch in 0..c {
        let plane = &image.values()[ch * h * w..(ch + 1) * h * w];
        region.clear();
        for y in bbox.y_min..=bbox.y_max {
            region.extend_from_slice(&plane[y * w + bbox.x_min..=y * w + bbox.x_max]);
        }
        out.extend(bilinear_plane(&region, bw, bh, out_w, out_h));
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Output of [`infer_local_region`].
#[derive(Debug, Clone)]
pub struct LocalRegion {
    /// Cropped and resized image, same shape as the input image.
    pub image: Tensor,
    pub bbox: BoundingBox,
    /// Normalized heat map at image resolution.
    pub heat_map: HeatMap,
    /// True when the mask was empty and the whole image was used.
    pub fallback: bool,
}

/// Full mask inference for one image. `features` is `[1, K, h, w]`,
/// `image` is `[C, H, W]`.
pub fn infer_local_region(
    features: &Tensor,
    image: &Tensor,
    tau: f64,
    stat: HeatStat,
) -> Result<LocalRegion> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape(
            "infer_local_region",
            "image",
            format!("expected [C,H,W], got {shape:?}"),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    let heat = compute_heatmap(features, stat)?;
    let heat = resize_bilinear(&normalize_heatmap(&heat), w, h)?;
    let mask = threshold_mask(&heat, tau)?;
    let (bbox, fallback) = match largest_connected_region_weighted(&mask, Some(&heat)) {
        Some(b) => (b.expand_to_min(MIN_CROP, w, h), false),
        None => (BoundingBox::full(w, h), true),
    };
    let cropped = crop_and_resize(image, bbox, h, w)?;
    Ok(LocalRegion {
        image: cropped,
        bbox,
        heat_map: heat,
        fallback,
    })
}
