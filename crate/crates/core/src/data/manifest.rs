use std::fmt::Write as _;
use std::path::Path;

use super::{finding_index, LabelVector, NO_FINDING, NUM_CLASSES};
use crate::error::{Error, Result};

/// One manifest record: an image filename and its labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub filename: String,
    pub labels: LabelVector,
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text)
}

/// Parses `filename,Finding1|Finding2` records. Extra columns are ignored
/// and a leading `Image Index,...` header is skipped, so the public label
/// file of the original chest X-ray collection reads unmodified.
pub fn parse_manifest_str(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if i == 0 && line.starts_with("Image Index") {
            continue;
        }
        let mut cols = line.split(',');
        let filename = cols.next().unwrap_or("").trim();
        let findings = cols.next().ok_or_else(|| Error::Manifest {
            line: line_no,
            message: "expected `filename,labels`".into(),
        })?;
        if filename.is_empty() {
            return Err(Error::Manifest {
                line: line_no,
                message: "empty filename".into(),
            });
        }
        let mut bits = [false; NUM_CLASSES];
        for name in findings.split('|') {
            if name.trim().is_empty() {
                return Err(Error::Manifest {
                    line: line_no,
                    message: "empty finding name".into(),
                });
            }
            let idx = finding_index(name).ok_or_else(|| Error::UnknownFinding {
                line: line_no,
                name: name.trim().to_string(),
            })?;
            bits[idx] = true;
        }
        if bits[NO_FINDING] && bits[..NO_FINDING].iter().any(|&b| b) {
            return Err(Error::ConflictingNoFinding { line: line_no });
        }
        entries.push(ManifestEntry {
            filename: filename.to_string(),
            labels: LabelVector::from_bits(bits)?,
        });
    }
    Ok(entries)
}

pub fn serialize_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        writeln!(out, "{},{}", e.filename, e.labels).unwrap();
    }
    out
}
