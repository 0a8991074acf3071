use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{
    parse_manifest, serialize_manifest, split_dataset, Dataset, GrayImage, Lesion, ManifestEntry,
    Sample, Split, SplitFractions, NUM_PATHOLOGIES,
};
use crate::attention::BoundingBox;
use crate::error::{Error, Result};

/// Reads an 8-bit grayscale image (PGM or PNG; colour is converted to luma).
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| image_error(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    GrayImage::new(w as usize, h as usize, img.into_raw())
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes an image. `.pgm` (and `.pnm`) files are binary graymaps; any
/// other extension picks its format from the image crate.
pub fn save_gray(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;

    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ext == "pgm" || ext == "pnm" {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = std::io::BufWriter::new(file);
        PnmEncoder::new(&mut writer)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(
                &image.pixels,
                image.width as u32,
                image.height as u32,
                image::ExtendedColorType::L8,
            )
            .map_err(|e| image_error(path, e))?;
        return std::io::Write::flush(&mut writer).map_err(|e| Error::io(path, e));
    }
    let buf = image::GrayImage::from_raw(
        image.width as u32,
        image.height as u32,
        image.pixels.clone(),
    )
    .expect("pixel count matches dimensions");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// File layout of a persisted dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub root: PathBuf,
}

impl DatasetFiles {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetFiles { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.csv")
    }

    pub fn boxes(&self) -> PathBuf {
        self.root.join("boxes.csv")
    }

    pub fn splits(&self) -> PathBuf {
        self.root.join("splits.csv")
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes images, manifest, boxes sidecar and split file under `root`.
pub fn save_dataset(root: impl AsRef<Path>, dataset: &Dataset) -> Result<DatasetFiles> {
    let files = DatasetFiles::new(root.as_ref());
    let images = files.images();
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut boxes = String::new();
    let mut splits = String::new();
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        save_gray(images.join(&s.id), &s.image)?;
        entries.push(ManifestEntry {
            filename: s.id.clone(),
            labels: s.labels,
        });
        for l in &s.lesions {
            let b = l.bbox;
            writeln!(
                boxes,
                "{},{},{},{},{}",
                s.id, b.x_min, b.y_min, b.x_max, b.y_max
            )
            .unwrap();
        }
        writeln!(splits, "{},{}", s.id, s.split).unwrap();
    }
    write_text(&files.manifest(), &serialize_manifest(&entries))?;
    write_text(&files.boxes(), &boxes)?;
    write_text(&files.splits(), &splits)?;
    Ok(files)
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match std::fs::read_to_string(path) {
        Ok(t) => Ok(Some(t)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn parse_keyed_lines(text: &str, columns: usize, what: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<String> = line.split(',').map(|c| c.trim().to_string()).collect();
        if cols.len() != columns {
            return Err(Error::Manifest {
                line: i + 1,
                message: format!("{what} line needs {columns} columns"),
            });
        }
        out.push((i + 1, cols));
    }
    Ok(out)
}

/// Loads a dataset directory written by [`save_dataset`], or any directory
/// with a `manifest.csv` and an `images/` folder. Without `splits.csv` the
/// samples are split with `fractions` under `split_seed`. Boxes from
/// `boxes.csv` are attached as lesions; their finding is known only when
/// the image carries exactly one pathology.
pub fn load_dataset(
    root: impl AsRef<Path>,
    fractions: SplitFractions,
    split_seed: u64,
) -> Result<Dataset> {
    let files = DatasetFiles::new(root.as_ref());
    let entries = parse_manifest(files.manifest())?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let splits: Vec<Split> = match read_optional(&files.splits())? {
        Some(text) => {
            let map: HashMap<String, (usize, String)> = parse_keyed_lines(&text, 2, "split")?
                .into_iter()
                .map(|(line, mut c)| {
                    let split = c.pop().unwrap();
                    (c.pop().unwrap(), (line, split))
                })
                .collect();
            entries
                .iter()
                .map(|e| {
                    let (line, s) = map.get(&e.filename).ok_or_else(|| Error::Manifest {
                        line: 0,
                        message: format!("{} has no split assignment", e.filename),
                    })?;
                    s.parse::<Split>().map_err(|_| Error::Manifest {
                        line: *line,
                        message: format!("unknown split {s:?}"),
                    })
                })
                .collect::<Result<_>>()?
        }
        None => split_dataset(entries.len(), fractions, split_seed)?,
    };
    let mut boxes: HashMap<String, Vec<BoundingBox>> = HashMap::new();
    if let Some(text) = read_optional(&files.boxes())? {
        for (line, c) in parse_keyed_lines(&text, 5, "box")? {
            let num = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::Manifest {
                    line,
                    message: format!("invalid box coordinate {s:?}"),
                })
            };
            let b = BoundingBox::new(num(&c[1])?, num(&c[2])?, num(&c[3])?, num(&c[4])?).map_err(
                |e| Error::Manifest {
                    line,
                    message: e.to_string(),
                },
            )?;
            boxes.entry(c[0].clone()).or_default().push(b);
        }
    }
    let images = files.images();
    let mut samples = Vec::with_capacity(entries.len());
    for (entry, split) in entries.into_iter().zip(splits) {
        let image = load_gray(images.join(&entry.filename))?;
        let pathologies: Vec<usize> = (0..NUM_PATHOLOGIES)
            .filter(|&i| entry.labels.get(i))
            .collect();
        let finding = (pathologies.len() == 1).then(|| pathologies[0]);
        let lesions = boxes
            .remove(&entry.filename)
            .unwrap_or_default()
            .into_iter()
            .map(|bbox| {
                if !bbox.fits(image.width, image.height) {
                    return Err(Error::Manifest {
                        line: 0,
                        message: format!("box {bbox} lies outside {}", entry.filename),
                    });
                }
                Ok(Lesion { finding, bbox })
            })
            .collect::<Result<_>>()?;
        samples.push(Sample {
            id: entry.filename,
            image,
            labels: entry.labels,
            split,
            lesions,
        });
    }
    Dataset::new(samples)
}
