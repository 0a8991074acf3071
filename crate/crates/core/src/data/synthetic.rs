use rand::Rng;
use rand_distr::StandardNormal;

use super::{
    split_dataset, Dataset, GrayImage, LabelVector, Lesion, Sample, SplitFractions, NUM_PATHOLOGIES,
};
use crate::attention::BoundingBox;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LesionKind {
    /// Small bright Gaussian spot.
    Blob,
    /// Large, faint, mottled patch.
    Diffuse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionClass {
    /// Pathology index the lesion is labelled with.
    pub finding: usize,
    pub kind: LesionKind,
    pub radius_min: usize,
    pub radius_max: usize,
    /// Peak intensity added on top of the background, in `[0, 1]` units.
    pub intensity: f64,
    /// Probability that a sample carries this lesion.
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub width: usize,
    pub height: usize,
    pub classes: Vec<LesionClass>,
    /// Standard deviation of the smoothed background noise.
    pub noise_level: f64,
    pub fractions: SplitFractions,
    pub seed: u64,
}

const BACKGROUND: f64 = 0.4;
const NODULE: usize = 5;
const PNEUMONIA: usize = 6;

impl SyntheticSpec {
    /// 64×64 images with a nodule-like blob class and a pneumonia-like
    /// diffuse class.
    pub fn desk(n_samples: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_samples,
            width: 64,
            height: 64,
            classes: vec![
                LesionClass {
                    finding: NODULE,
                    kind: LesionKind::Blob,
                    radius_min: 2,
                    radius_max: 4,
                    intensity: 0.5,
                    prevalence: 0.35,
                },
                LesionClass {
                    finding: PNEUMONIA,
                    kind: LesionKind::Diffuse,
                    radius_min: 10,
                    radius_max: 16,
                    intensity: 0.15,
                    prevalence: 0.35,
                },
            ],
            noise_level: 0.08,
            fractions: SplitFractions::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise level {} must be >= 0",
                self.noise_level
            )));
        }
        let has = |k| self.classes.iter().any(|c| c.kind == k);
        if !has(LesionKind::Blob) || !has(LesionKind::Diffuse) {
            return Err(Error::InvalidArgument(
                "a synthetic spec needs at least one blob class and one diffuse class".into(),
            ));
        }
        for c in &self.classes {
            if c.finding >= NUM_PATHOLOGIES {
                return Err(Error::InvalidArgument(format!(
                    "lesion finding index {} is not a pathology",
                    c.finding
                )));
            }
            if c.radius_min == 0 || c.radius_min > c.radius_max {
                return Err(Error::InvalidArgument(format!(
                    "invalid radius range {}..={}",
                    c.radius_min, c.radius_max
                )));
            }
            if 2 * c.radius_max + 1 > self.width.min(self.height) {
                return Err(Error::InvalidArgument(format!(
                    "lesion of radius {} does not fit a {}x{} image",
                    c.radius_max, self.width, self.height
                )));
            }
            if !(0.0..=1.0).contains(&c.prevalence) || !(c.intensity > 0.0 && c.intensity <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "prevalence {} and intensity {} must lie in [0,1] and (0,1]",
                    c.prevalence, c.intensity
                )));
            }
        }
        Ok(())
    }
}

fn box_blur(src: &[f64], w: usize, h: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let at = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| src[y * w + at(x as isize + d, w)]).sum();
            tmp[y * w + x] = s * norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| tmp[at(y as isize + d, h) * w + x]).sum();
            out[y * w + x] = s * norm;
        }
    }
    out
}

fn normal_field<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Smoothed Gaussian noise with unit standard deviation.
fn smooth_field<R: Rng>(rng: &mut R, w: usize, h: usize, radius: usize) -> Vec<f64> {
    let blurred = box_blur(&normal_field(rng, w * h), w, h, radius);
    // a separable box of side k divides the variance by k^2
    let k = (2 * radius + 1) as f64;
    blurred.into_iter().map(|v| v * k).collect()
}

fn paint_lesion<R: Rng>(
    canvas: &mut [f64],
    w: usize,
    h: usize,
    class: &LesionClass,
    rng: &mut R,
) -> BoundingBox {
    let r = rng.random_range(class.radius_min..=class.radius_max);
    let cx = rng.random_range(r..w - r);
    let cy = rng.random_range(r..h - r);
    let bbox = BoundingBox {
        x_min: cx - r,
        y_min: cy - r,
        x_max: cx + r,
        y_max: cy + r,
    };
    let side = 2 * r + 1;
    let texture = match class.kind {
        LesionKind::Blob => None,
        LesionKind::Diffuse => Some(smooth_field(rng, side, side, 1)),
    };
    let rf = r as f64;
    for y in bbox.y_min..=bbox.y_max {
        for x in bbox.x_min..=bbox.x_max {
            let dx = x as f64 - cx as f64;
            let dy = y as f64 - cy as f64;
            let d2 = dx * dx + dy * dy;
            let weight = match class.kind {
                LesionKind::Blob => {
                    let sigma = rf / 2.0;
                    (-d2 / (2.0 * sigma * sigma)).exp()
                }
                LesionKind::Diffuse => {
                    let q = (1.0 - d2 / (rf * rf)).max(0.0);
                    let t = texture.as_ref().unwrap()[(y - bbox.y_min) * side + (x - bbox.x_min)];
                    // mottling never pushes the patch below zero or above its centre
                    q * q * (0.75 + 0.25 * t.tanh())
                }
            };
            canvas[y * w + x] += class.intensity * weight;
        }
    }
    bbox
}

/// Generates a labelled dataset with planted lesions and their ground-truth
/// boxes. Output depends only on `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let splits = split_dataset(
        spec.n_samples,
        spec.fractions,
        rng::derive_seed(spec.seed, "split"),
    )?;
    let mut rng = rng::stream(spec.seed, "synthetic");
    let mut samples = Vec::with_capacity(spec.n_samples);
    for (i, split) in splits.into_iter().enumerate() {
        let mut canvas = if spec.noise_level > 0.0 {
            let coarse = smooth_field(&mut rng, w, h, 2);
            let fine = normal_field(&mut rng, w * h);
            coarse
                .iter()
                .zip(&fine)
                .map(|(c, f)| BACKGROUND + spec.noise_level * (0.8 * c + 0.6 * f))
                .collect()
        } else {
            vec![BACKGROUND; w * h]
        };
        let mut lesions = Vec::new();
        let mut findings = Vec::new();
        for class in &spec.classes {
            if rng.random_bool(class.prevalence) {
                let bbox = paint_lesion(&mut canvas, w, h, class, &mut rng);
                lesions.push(Lesion {
                    finding: Some(class.finding),
                    bbox,
                });
                if !findings.contains(&class.finding) {
                    findings.push(class.finding);
                }
            }
        }
        let pixels = canvas
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        samples.push(Sample {
            id: format!("syn_{i:05}.pgm"),
            image: GrayImage::new(w, h, pixels)?,
            labels: LabelVector::from_pathologies(&findings)?,
            split,
            lesions,
        });
    }
    Dataset::new(samples)
}
