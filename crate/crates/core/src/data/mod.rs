//! Samples, labels and everything needed to turn images into training
//! tensors: manifest parsing, deterministic splits, augmentation, a
//! synthetic localized-lesion generator and on-disk persistence.

mod augment;
mod io;
mod manifest;
mod split;
mod synthetic;

use std::fmt;
use std::str::FromStr;

pub use augment::{augment, dataset_mean, AugmentMode, AugmentSizes, EvalFrame};
pub use io::{load_dataset, load_gray, save_dataset, save_gray, DatasetFiles};
pub use manifest::{parse_manifest, parse_manifest_str, serialize_manifest, ManifestEntry};
pub use split::{split_dataset, SplitFractions};
pub use synthetic::{generate_synthetic, LesionClass, LesionKind, SyntheticSpec};

use crate::attention::BoundingBox;
use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// Number of label entries per image.
pub const NUM_CLASSES: usize = 15;
/// Pathology classes; the last label entry is "No Finding".
pub const NUM_PATHOLOGIES: usize = 14;
pub const NO_FINDING: usize = 14;

/// Label names in column order.
pub const FINDINGS: [&str; NUM_CLASSES] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
    "No Finding",
];

pub fn finding_index(name: &str) -> Option<usize> {
    let name = name.trim();
    FINDINGS
        .iter()
        .position(|f| *f == name)
        .or_else(|| (name == "Pleural Thickening").then_some(12))
}

/// 15-entry multi-hot target. Setting "No Finding" excludes every pathology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelVector {
    bits: [bool; NUM_CLASSES],
}

impl LabelVector {
    pub fn no_finding() -> Self {
        let mut bits = [false; NUM_CLASSES];
        bits[NO_FINDING] = true;
        LabelVector { bits }
    }

    pub fn from_bits(bits: [bool; NUM_CLASSES]) -> Result<Self> {
        if bits[NO_FINDING] && bits[..NUM_PATHOLOGIES].iter().any(|&b| b) {
            return Err(Error::ConflictingNoFinding { line: 0 });
        }
        Ok(LabelVector { bits })
    }

    /// From pathology indices; an empty list means "No Finding".
    pub fn from_pathologies(indices: &[usize]) -> Result<Self> {
        let mut bits = [false; NUM_CLASSES];
        for &i in indices {
            if i >= NUM_PATHOLOGIES {
                return Err(Error::InvalidArgument(format!(
                    "pathology index {i} out of range"
                )));
            }
            bits[i] = true;
        }
        if indices.is_empty() {
            bits[NO_FINDING] = true;
        }
        Ok(LabelVector { bits })
    }

    pub fn bits(&self) -> &[bool; NUM_CLASSES] {
        &self.bits
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn as_f64(&self) -> [f64; NUM_CLASSES] {
        self.bits.map(f64::from)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.bits
            .iter()
            .zip(FINDINGS)
            .filter_map(|(&b, name)| b.then_some(name))
            .collect()
    }
}

impl fmt::Display for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join("|"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// 8-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// `[1, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let values = self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        Tensor::new(vec![1, self.height, self.width], values).expect("consistent size")
    }

    /// Inverse of [`GrayImage::to_tensor`] for a single-channel tensor,
    /// clamping to `[0, 1]` and rounding.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::shape(
                "GrayImage::from_unit_tensor",
                "shape",
                format!("expected [1,H,W], got {s:?}"),
            ));
        }
        let pixels = t
            .values()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::new(s[2], s[1], pixels)
    }
}

/// Ground-truth lesion location. Never used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lesion {
    /// Pathology index, when known.
    pub finding: Option<usize>,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub labels: LabelVector,
    pub split: Split,
    pub lesions: Vec<Lesion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub width: usize,
    pub height: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let (width, height) = (first.image.width, first.image.height);
        if let Some(bad) = samples
            .iter()
            .find(|s| s.image.width != width || s.image.height != height)
        {
            return Err(Error::InvalidArgument(format!(
                "image {} is {}x{}, dataset is {width}x{height}",
                bad.id, bad.image.width, bad.image.height
            )));
        }
        Ok(Dataset {
            samples,
            width,
            height,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// One split preprocessed for evaluation: eval-mode tensors plus labels
/// and ground-truth boxes in original image coordinates.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub ids: Vec<String>,
    /// `[C, S, S]` per sample.
    pub images: Vec<Tensor>,
    pub labels: Vec<LabelVector>,
    pub lesions: Vec<Vec<Lesion>>,
    pub frame: EvalFrame,
}

impl EvalSet {
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a Sample>,
        sizes: AugmentSizes,
        mean: f64,
    ) -> Result<Self> {
        let mut ids = Vec::new();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut lesions = Vec::new();
        let mut dims = None;
        // eval mode draws nothing from the generator
        let mut unused = crate::rng::stream(0, "eval");
        for s in samples {
            dims.get_or_insert((s.image.width, s.image.height));
            images.push(augment(
                &s.image,
                AugmentMode::Eval,
                sizes,
                mean,
                &mut unused,
            )?);
            ids.push(s.id.clone());
            labels.push(s.labels);
            lesions.push(s.lesions.clone());
        }
        let (w, h) = dims.ok_or(Error::EmptyDataset)?;
        Ok(EvalSet {
            ids,
            images,
            labels,
            lesions,
            frame: EvalFrame::new(w, h, sizes)?,
        })
    }

    pub fn from_dataset(
        dataset: &Dataset,
        split: Split,
        sizes: AugmentSizes,
        mean: f64,
    ) -> Result<Self> {
        Self::from_samples(dataset.split(split), sizes, mean)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[n, C, S, S]` batch of samples `range`.
    pub fn batch(&self, range: std::ops::Range<usize>) -> Result<Tensor> {
        Tensor::stack(&self.images[range])
    }
}
