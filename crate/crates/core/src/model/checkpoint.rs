use std::fmt::Write as _;
use std::path::Path;

use super::{AgCnn, BackboneConfig};
use crate::attention::HeatStat;
use crate::data::AugmentSizes;
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::metrics::Branch;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"AGCNNCKP";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub backbone: BackboneConfig,
    pub tau: f64,
    pub stat: HeatStat,
    pub strategy: String,
    /// Training-split mean subtracted from every input, in `[0, 1]` units.
    pub mean: f64,
    /// Resize and crop used at evaluation time.
    pub sizes: AugmentSizes,
}

impl CheckpointHeader {
    fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "version={}", self.version).unwrap();
        writeln!(s, "backbone={}", self.backbone).unwrap();
        // Debug formatting of f64 is the shortest exact round-trip form
        writeln!(s, "tau={:?}", self.tau).unwrap();
        writeln!(s, "stat={}", self.stat).unwrap();
        writeln!(s, "strategy={}", self.strategy).unwrap();
        writeln!(s, "mean={:?}", self.mean).unwrap();
        writeln!(s, "resize={}", self.sizes.resize).unwrap();
        writeln!(s, "crop={}", self.sizes.crop).unwrap();
        s
    }

    fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let (mut version, mut backbone, mut tau, mut stat, mut strategy) =
            (None, None, None, None, None);
        let (mut mean, mut resize, mut crop) = (None, None, None);
        let size = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| bad(format!("bad size {v:?}")))
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
            match k {
                "version" => {
                    version = Some(
                        v.parse::<u32>()
                            .map_err(|_| bad(format!("bad version {v:?}")))?,
                    )
                }
                "backbone" => {
                    backbone = Some(
                        v.parse::<BackboneConfig>()
                            .map_err(|e| bad(e.to_string()))?,
                    )
                }
                "tau" => {
                    tau = Some(
                        v.parse::<f64>()
                            .map_err(|_| bad(format!("bad tau {v:?}")))?,
                    )
                }
                "stat" => stat = Some(v.parse::<HeatStat>().map_err(|e| bad(e.to_string()))?),
                "strategy" => strategy = Some(v.to_string()),
                "mean" => {
                    mean = Some(
                        v.parse::<f64>()
                            .map_err(|_| bad(format!("bad mean {v:?}")))?,
                    )
                }
                "resize" => resize = Some(size(v)?),
                "crop" => crop = Some(size(v)?),
                _ => {}
            }
        }
        let missing = |k: &str| bad(format!("header lacks `{k}`"));
        Ok(CheckpointHeader {
            version: version.ok_or_else(|| missing("version"))?,
            backbone: backbone.ok_or_else(|| missing("backbone"))?,
            tau: tau.ok_or_else(|| missing("tau"))?,
            stat: stat.ok_or_else(|| missing("stat"))?,
            strategy: strategy.ok_or_else(|| missing("strategy"))?,
            mean: mean.ok_or_else(|| missing("mean"))?,
            sizes: AugmentSizes {
                resize: resize.ok_or_else(|| missing("resize"))?,
                crop: crop.ok_or_else(|| missing("crop"))?,
            },
        })
    }
}

/// Versioned container of named tensors. Values are stored as
/// little-endian `f64`, so a save/load round trip is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub records: Vec<(String, Tensor)>,
}

fn prefix(branch: Branch) -> &'static str {
    match branch {
        Branch::Global => "global.",
        Branch::Local => "local.",
        Branch::Fusion => "fusion.",
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    /// Collects the tensors of the listed branches.
    pub fn from_models(header: CheckpointHeader, models: &AgCnn, branches: &[Branch]) -> Self {
        let mut records = Vec::new();
        for &b in branches {
            let named = match b {
                Branch::Global => models.global.named_tensors(),
                Branch::Local => models.local.named_tensors(),
                Branch::Fusion => models.fusion.named_tensors(),
            };
            records.extend(named.into_iter().map(|(n, t)| {
                let mut t = t.clone().with_requires_grad(false);
                t.zero_grad();
                (format!("{}{n}", prefix(b)), t)
            }));
        }
        Checkpoint { header, records }
    }

    /// Branches with at least one record in this checkpoint.
    pub fn branches(&self) -> Vec<Branch> {
        Branch::ALL
            .into_iter()
            .filter(|&b| self.records.iter().any(|(n, _)| n.starts_with(prefix(b))))
            .collect()
    }

    /// Copies stored values into `models`. Every branch present in the
    /// checkpoint must be complete and shape-compatible. Returns the
    /// branches that were overwritten.
    pub fn apply(&self, models: &mut AgCnn) -> Result<Vec<Branch>> {
        if self.header.backbone != *models.config() {
            return Err(Error::Checkpoint(format!(
                "checkpoint backbone {} does not match model backbone {}",
                self.header.backbone,
                models.config()
            )));
        }
        for (name, _) in &self.records {
            if !Branch::ALL.iter().any(|&b| name.starts_with(prefix(b))) {
                return Err(Error::Checkpoint(format!("unknown record {name:?}")));
            }
        }
        let present = self.branches();
        for &b in &present {
            let p = prefix(b);
            let targets = match b {
                Branch::Global => models.global.named_tensors_mut(),
                Branch::Local => models.local.named_tensors_mut(),
                Branch::Fusion => models.fusion.named_tensors_mut(),
            };
            let expected = targets.len();
            let found = self
                .records
                .iter()
                .filter(|(n, _)| n.starts_with(p))
                .count();
            if found != expected {
                return Err(Error::Checkpoint(format!(
                    "{p}* has {found} records, expected {expected}"
                )));
            }
            for (name, target) in targets {
                let full = format!("{p}{name}");
                let (_, src) = self
                    .records
                    .iter()
                    .find(|(n, _)| *n == full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing record {full:?}")))?;
                if src.shape() != target.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{full}: stored shape {:?}, model shape {:?}",
                        src.shape(),
                        target.shape()
                    )));
                }
                target.values_mut().copy_from_slice(src.values());
                target.zero_grad();
            }
        }
        Ok(present)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.version.to_le_bytes());
        let header = self.header.to_text();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header = CheckpointHeader::from_text(&r.string()?)?;
        if header.version != version {
            return Err(Error::Checkpoint(
                "header version disagrees with container".into(),
            ));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel =
                numel.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, values)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { header, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
