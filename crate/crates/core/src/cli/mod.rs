//! The `agcnn` command-line front end.
//!
//! Every command resolves a [`RunConfig`] from an optional `--config` file
//! of `key = value` lines, then applies command-line flags on top. The
//! resolved settings, defaults included, are written to the output
//! directory as `<command>.conf`; passing that file back with `--config`
//! repeats the run.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while running.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::attention::{BoundingBox, HeatMap, HeatStat};
use crate::data::{
    augment, finding_index, generate_synthetic, load_dataset, load_gray, save_dataset, save_gray,
    AugmentMode, EvalFrame, EvalSet, GrayImage, LesionKind, Split, SplitFractions, SyntheticSpec,
    FINDINGS,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Branch};
use crate::model::BackboneConfig;
use crate::rng;
use crate::trainer::{
    load_stage_checkpoints, sweep_tau, tau_table_to_text, Strategy, TrainConfig, TrainData, Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Weight of the heat map when blended onto the input image.
pub const OVERLAY_ALPHA: f64 = 0.5;

const DEFAULT_TAUS: &str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";

#[derive(Debug, Parser)]
#[command(
    name = "agcnn",
    version,
    about = "Attention-guided global/local/fusion classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic lesion dataset.
    Synth(SynthArgs),
    /// Train the three branches on a dataset.
    Train(TrainArgs),
    /// Evaluate trained checkpoints on a dataset split.
    Eval(EvalArgs),
    /// Classify one image and export heat-map and box overlays.
    Infer(InferArgs),
    /// Retrain the local and fusion branches for several thresholds.
    SweepTau(SweepArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Any configuration key, e.g. `--set base_lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Heat-map threshold in [0, 1].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Heat-map statistic: max, l1 or l2.
    #[arg(long)]
    pub stat: Option<String>,
    /// Training order: G_L_F, G_L_F_star, G_LF, GL_F or GLF.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Epochs per stage.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of images.
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Dataset directory, as written by `synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory holding `stage*.ckpt` files.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Split to evaluate: test (default) or val.
    #[arg(long)]
    pub split: Option<String>,
    /// Override the checkpoint's threshold.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Override the checkpoint's statistic.
    #[arg(long)]
    pub stat: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory holding `stage*.ckpt` files.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Image to classify.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub stat: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated thresholds.
    #[arg(long)]
    pub taus: Option<String>,
}

/// Ordered `key = value` settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `key = value` lines. Blank lines and lines starting with `#`
    /// are ignored; a later duplicate key wins.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    i + 1
                ))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            cfg.set(k, v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("`{key}`: invalid value {v:?}: {e}")))
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))
    }

    fn reject_unknown(&self, allowed: &[&[&str]]) -> Result<()> {
        for k in self.keys() {
            if !allowed.iter().any(|set| set.contains(&k)) {
                return Err(Error::Config(format!("unknown setting `{k}`")));
            }
        }
        Ok(())
    }

    /// Training settings: the preset named by `preset` (desk or reference)
    /// with every other training key applied on top.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = match self.get("preset").unwrap_or("desk") {
            "desk" => TrainConfig::desk(),
            "reference" => TrainConfig::reference(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected desk or reference)"
                )))
            }
        };
        if let Some(v) = self.parsed("tau")? {
            c.tau = v;
        }
        if let Some(v) = self.parsed::<HeatStat>("stat")? {
            c.stat = v;
        }
        if let Some(v) = self.parsed::<Strategy>("strategy")? {
            c.strategy = v;
        }
        macro_rules! apply {
            ($($key:literal => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.parsed($key)? { $field = v; })*
            };
        }
        apply! {
            "epochs" => c.epochs_per_stage,
            "base_lr" => c.base_lr,
            "lr_decay_factor" => c.lr_decay_factor,
            "lr_decay_epoch" => c.lr_decay_epoch,
            "momentum" => c.momentum,
            "weight_decay" => c.weight_decay,
            "batch_global" => c.batch_global,
            "batch_local" => c.batch_local,
            "batch_fusion" => c.batch_fusion,
            "batch_joint" => c.batch_joint,
            "seed" => c.seed,
            "resize" => c.sizes.resize,
            "crop" => c.sizes.crop,
        }
        if let Some(v) = self.parsed::<BackboneConfig>("backbone")? {
            c.backbone = v;
        }
        c.validate()?;
        Ok(c)
    }

    /// Split fractions from `train_fraction`, `val_fraction`, `test_fraction`.
    pub fn fractions(&self) -> Result<SplitFractions> {
        let mut f = SplitFractions::default();
        if let Some(v) = self.parsed("train_fraction")? {
            f.train = v;
        }
        if let Some(v) = self.parsed("val_fraction")? {
            f.val = v;
        }
        if let Some(v) = self.parsed("test_fraction")? {
            f.test = v;
        }
        Ok(f)
    }

    /// Synthetic dataset settings on top of the desk preset. The `blob_*`
    /// and `diffuse_*` keys address the first lesion class of each kind.
    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let mut s = SyntheticSpec::desk(
            self.parsed("n_samples")?.unwrap_or(600),
            self.parsed("seed")?.unwrap_or(0),
        );
        if let Some(v) = self.parsed("width")? {
            s.width = v;
        }
        if let Some(v) = self.parsed("height")? {
            s.height = v;
        }
        if let Some(v) = self.parsed("noise_level")? {
            s.noise_level = v;
        }
        s.fractions = self.fractions()?;
        for (prefix, kind) in [("blob", LesionKind::Blob), ("diffuse", LesionKind::Diffuse)] {
            let class = s
                .classes
                .iter_mut()
                .find(|c| c.kind == kind)
                .expect("preset has both kinds");
            let key = |k: &str| format!("{prefix}_{k}");
            if let Some(name) = self.get(&key("finding")) {
                class.finding = finding_index(name)
                    .filter(|&i| i < crate::data::NUM_PATHOLOGIES)
                    .ok_or_else(|| {
                        Error::Config(format!("`{}`: unknown pathology {name:?}", key("finding")))
                    })?;
            }
            if let Some(v) = self.parsed(&key("radius_min"))? {
                class.radius_min = v;
            }
            if let Some(v) = self.parsed(&key("radius_max"))? {
                class.radius_max = v;
            }
            if let Some(v) = self.parsed(&key("intensity"))? {
                class.intensity = v;
            }
            if let Some(v) = self.parsed(&key("prevalence"))? {
                class.prevalence = v;
            }
        }
        s.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(s)
    }
}

const COMMON_KEYS: &[&str] = &["seed", "out"];
const SPLIT_KEYS: &[&str] = &["train_fraction", "val_fraction", "test_fraction"];
const TRAIN_KEYS: &[&str] = &[
    "preset",
    "tau",
    "stat",
    "strategy",
    "epochs",
    "base_lr",
    "lr_decay_factor",
    "lr_decay_epoch",
    "momentum",
    "weight_decay",
    "batch_global",
    "batch_local",
    "batch_fusion",
    "batch_joint",
    "resize",
    "crop",
    "backbone",
];
const SYNTH_KEYS: &[&str] = &[
    "n_samples",
    "width",
    "height",
    "noise_level",
    "blob_finding",
    "blob_radius_min",
    "blob_radius_max",
    "blob_intensity",
    "blob_prevalence",
    "diffuse_finding",
    "diffuse_radius_min",
    "diffuse_radius_max",
    "diffuse_intensity",
    "diffuse_prevalence",
];

fn train_entries(out: &mut RunConfig, c: &TrainConfig) {
    out.set("tau", format!("{:?}", c.tau));
    out.set("stat", c.stat);
    out.set("strategy", c.strategy);
    out.set("epochs", c.epochs_per_stage);
    out.set("base_lr", format!("{:?}", c.base_lr));
    out.set("lr_decay_factor", format!("{:?}", c.lr_decay_factor));
    out.set("lr_decay_epoch", c.lr_decay_epoch);
    out.set("momentum", format!("{:?}", c.momentum));
    out.set("weight_decay", format!("{:?}", c.weight_decay));
    out.set("batch_global", c.batch_global);
    out.set("batch_local", c.batch_local);
    out.set("batch_fusion", c.batch_fusion);
    out.set("batch_joint", c.batch_joint);
    out.set("seed", c.seed);
    out.set("resize", c.sizes.resize);
    out.set("crop", c.sizes.crop);
    out.set("backbone", &c.backbone);
}

fn fraction_entries(out: &mut RunConfig, f: SplitFractions) {
    out.set("train_fraction", format!("{:?}", f.train));
    out.set("val_fraction", format!("{:?}", f.val));
    out.set("test_fraction", format!("{:?}", f.test));
}

fn synth_entries(out: &mut RunConfig, s: &SyntheticSpec) {
    out.set("n_samples", s.n_samples);
    out.set("width", s.width);
    out.set("height", s.height);
    out.set("noise_level", format!("{:?}", s.noise_level));
    out.set("seed", s.seed);
    fraction_entries(out, s.fractions);
    for (prefix, kind) in [("blob", LesionKind::Blob), ("diffuse", LesionKind::Diffuse)] {
        let c = s
            .classes
            .iter()
            .find(|c| c.kind == kind)
            .expect("validated spec has both kinds");
        out.set(&format!("{prefix}_finding"), FINDINGS[c.finding]);
        out.set(&format!("{prefix}_radius_min"), c.radius_min);
        out.set(&format!("{prefix}_radius_max"), c.radius_max);
        out.set(&format!("{prefix}_intensity"), format!("{:?}", c.intensity));
        out.set(
            &format!("{prefix}_prevalence"),
            format!("{:?}", c.prevalence),
        );
    }
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim());
    }
    if let Some(s) = common.seed {
        cfg.set("seed", s);
    }
    if let Some(o) = &common.out {
        cfg.set("out", o.display());
    }
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) {
    if let Some(v) = f.tau {
        cfg.set("tau", format!("{v:?}"));
    }
    if let Some(v) = &f.stat {
        cfg.set("stat", v);
    }
    if let Some(v) = &f.strategy {
        cfg.set("strategy", v);
    }
    if let Some(v) = f.epochs {
        cfg.set("epochs", v);
    }
}

fn set_opt(cfg: &mut RunConfig, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        cfg.set(key, v.to_string());
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo(dir: &Path, command: &str, resolved: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(format!("{command}.conf")), &resolved.to_text())
}

/// Writes a synthetic dataset (images, manifest, boxes, splits).
pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    cfg.reject_unknown(&[COMMON_KEYS, SPLIT_KEYS, SYNTH_KEYS])?;
    let out = cfg.path("out")?;
    let spec = cfg.synthetic_spec()?;
    let dataset = generate_synthetic(&spec)?;
    save_dataset(&out, &dataset)?;
    let mut resolved = RunConfig::default();
    synth_entries(&mut resolved, &spec);
    resolved.set("out", out.display());
    echo(&out, "synth", &resolved)?;
    Ok(format!(
        "wrote {} images to {}\n",
        dataset.samples.len(),
        out.display()
    ))
}

fn load_train_data(cfg: &RunConfig, train: &TrainConfig) -> Result<TrainData> {
    let data = cfg.path("data")?;
    let ds = load_dataset(&data, cfg.fractions()?, train.seed)?;
    TrainData::from_dataset(&ds, train)
}

/// Trains under the configured strategy, writing `stage<k>.ckpt` and
/// `stage<k>.txt` for every stage.
pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    cfg.reject_unknown(&[COMMON_KEYS, SPLIT_KEYS, TRAIN_KEYS, &["data"]])?;
    let out = cfg.path("out")?;
    let train = cfg.train_config()?;
    let data = load_train_data(cfg, &train)?;
    let mut resolved = RunConfig::default();
    train_entries(&mut resolved, &train);
    fraction_entries(&mut resolved, cfg.fractions()?);
    resolved.set("data", cfg.path("data")?.display());
    resolved.set("out", out.display());
    echo(&out, "train", &resolved)?;

    let (_, reports) = Trainer::new(train)?.with_output_dir(&out).train(&data)?;
    let mut msg = String::new();
    for r in &reports {
        let best = r.best();
        let auc = best
            .val_mean_auc
            .map_or("skipped".to_string(), |a| format!("{a:.4}"));
        writeln!(
            msg,
            "stage {}: best epoch {} (val mean AUC {auc})",
            r.stage, r.best_epoch
        )
        .unwrap();
    }
    Ok(msg)
}

/// Evaluates trained checkpoints, writing one AUC report per branch.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    cfg.reject_unknown(&[
        COMMON_KEYS,
        SPLIT_KEYS,
        &["data", "checkpoints", "split", "tau", "stat"],
    ])?;
    let ckpt_dir = cfg.path("checkpoints")?;
    let out = cfg
        .get("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| ckpt_dir.clone());
    let split: Split = cfg.parsed("split")?.unwrap_or(Split::Test);
    let (models, header) = load_stage_checkpoints(&ckpt_dir)?;
    let tau = cfg.parsed("tau")?.unwrap_or(header.tau);
    let stat = cfg.parsed("stat")?.unwrap_or(header.stat);
    let seed = cfg.parsed("seed")?.unwrap_or(0);
    let data = cfg.path("data")?;

    let mut resolved = RunConfig::default();
    resolved.set("checkpoints", ckpt_dir.display());
    resolved.set("data", data.display());
    resolved.set("split", split);
    resolved.set("tau", format!("{tau:?}"));
    resolved.set("stat", stat);
    resolved.set("seed", seed);
    resolved.set("out", out.display());
    fraction_entries(&mut resolved, cfg.fractions()?);
    echo(&out, "eval", &resolved)?;

    let ds = load_dataset(&data, cfg.fractions()?, seed)?;
    let set = EvalSet::from_dataset(&ds, split, header.sizes, header.mean)?;
    let eval = evaluate(&models, &set, tau, stat)?;
    let mut msg = String::new();
    for b in Branch::ALL {
        let report = eval.report(b);
        write_file(
            &out.join(format!("report_{split}_{b}.txt")),
            &report.to_text(),
        )?;
        let mean = report
            .mean
            .map_or("skipped".to_string(), |m| format!("{m:.4}"));
        writeln!(msg, "{b}: mean AUC {mean} on {} {split} images", set.len()).unwrap();
    }
    Ok(msg)
}

/// Heat map (eval-crop frame) blended onto the original image:
/// `(1 - alpha) * pixel + alpha * 255 * heat`, with zero heat outside the
/// crop.
pub fn heat_overlay(image: &GrayImage, heat: &HeatMap, frame: &EvalFrame, alpha: f64) -> GrayImage {
    let mut pixels = Vec::with_capacity(image.pixels.len());
    for y in 0..image.height {
        for x in 0..image.width {
            let (cx, cy) = frame.original_point_to_crop(x, y);
            let h = sample_heat(heat, cx, cy);
            let p = image.pixels[y * image.width + x] as f64;
            pixels.push(
                ((1.0 - alpha) * p + alpha * 255.0 * h)
                    .round()
                    .clamp(0.0, 255.0) as u8,
            );
        }
    }
    GrayImage::new(image.width, image.height, pixels).expect("same dimensions as input")
}

fn sample_heat(heat: &HeatMap, x: f64, y: f64) -> f64 {
    let (w, h) = (heat.width as f64, heat.height as f64);
    if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
        return 0.0;
    }
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(heat.width - 1), (y0 + 1).min(heat.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = heat.at(x0, y0) * (1.0 - fx) + heat.at(x1, y0) * fx;
    let bottom = heat.at(x0, y1) * (1.0 - fx) + heat.at(x1, y1) * fx;
    (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
}

/// The image with the one-pixel outline of `bbox` drawn in white over dark
/// pixels and black over bright ones.
pub fn box_overlay(image: &GrayImage, bbox: BoundingBox) -> GrayImage {
    let mut out = image.clone();
    for y in bbox.y_min..=bbox.y_max.min(image.height - 1) {
        for x in bbox.x_min..=bbox.x_max.min(image.width - 1) {
            if x == bbox.x_min || x == bbox.x_max || y == bbox.y_min || y == bbox.y_max {
                let p = &mut out.pixels[y * image.width + x];
                *p = if *p < 128 { 255 } else { 0 };
            }
        }
    }
    out
}

/// Classifies one image. Prints the 15 classes ranked by fusion
/// probability and writes `prediction.txt`, `heatmap_overlay.pgm` and
/// `box_overlay.pgm`, both overlays at the input's dimensions.
pub fn cmd_infer(cfg: &RunConfig) -> Result<String> {
    cfg.reject_unknown(&[COMMON_KEYS, &["checkpoints", "image", "tau", "stat"]])?;
    let ckpt_dir = cfg.path("checkpoints")?;
    let image_path = cfg.path("image")?;
    let out = cfg
        .get("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let (models, header) = load_stage_checkpoints(&ckpt_dir)?;
    let tau = cfg.parsed("tau")?.unwrap_or(header.tau);
    let stat = cfg.parsed("stat")?.unwrap_or(header.stat);

    let mut resolved = RunConfig::default();
    resolved.set("checkpoints", ckpt_dir.display());
    resolved.set("image", image_path.display());
    resolved.set("tau", format!("{tau:?}"));
    resolved.set("stat", stat);
    resolved.set("out", out.display());
    echo(&out, "infer", &resolved)?;

    let image = load_gray(&image_path)?;
    let frame = EvalFrame::new(image.width, image.height, header.sizes)?;
    // eval-mode augmentation draws nothing from the stream
    let input = augment(
        &image,
        AugmentMode::Eval,
        header.sizes,
        header.mean,
        &mut rng::stream(0, "infer"),
    )?;
    let pred = models.predict(&input, tau, stat)?;
    let bbox = frame.crop_to_original(pred.bbox);

    let mut record = String::new();
    writeln!(
        record,
        "# image={} tau={tau} stat={stat}",
        image_path.display()
    )
    .unwrap();
    writeln!(record, "# fallback={}", pred.fallback).unwrap();
    writeln!(
        record,
        "# box={},{},{},{}",
        bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max
    )
    .unwrap();
    writeln!(record, "rank,class,fusion,global,local").unwrap();
    let mut order: Vec<usize> = (0..FINDINGS.len()).collect();
    order.sort_by(|&a, &b| pred.fusion[b].total_cmp(&pred.fusion[a]).then(a.cmp(&b)));
    for (rank, &k) in order.iter().enumerate() {
        writeln!(
            record,
            "{},{},{:.6},{:.6},{:.6}",
            rank + 1,
            FINDINGS[k],
            pred.fusion[k],
            pred.global[k],
            pred.local[k]
        )
        .unwrap();
    }
    write_file(&out.join("prediction.txt"), &record)?;
    save_gray(
        out.join("heatmap_overlay.pgm"),
        &heat_overlay(&image, &pred.heat_map, &frame, OVERLAY_ALPHA),
    )?;
    save_gray(out.join("box_overlay.pgm"), &box_overlay(&image, bbox))?;
    Ok(record)
}

fn parse_taus(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("`taus`: invalid value {t:?}")))
        })
        .collect()
}

/// Trains the global branch once, then the local and fusion branches for
/// each threshold, and writes `tau_sweep.txt`.
pub fn cmd_sweep_tau(cfg: &RunConfig) -> Result<String> {
    cfg.reject_unknown(&[COMMON_KEYS, SPLIT_KEYS, TRAIN_KEYS, &["data", "taus"]])?;
    let out = cfg.path("out")?;
    let train = cfg.train_config()?;
    let taus = parse_taus(cfg.get("taus").unwrap_or(DEFAULT_TAUS))?;
    let data = load_train_data(cfg, &train)?;
    let mut resolved = RunConfig::default();
    train_entries(&mut resolved, &train);
    fraction_entries(&mut resolved, cfg.fractions()?);
    resolved.set("data", cfg.path("data")?.display());
    resolved.set("out", out.display());
    resolved.set(
        "taus",
        taus.iter()
            .map(|t| format!("{t:?}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    echo(&out, "sweep-tau", &resolved)?;

    let rows = sweep_tau(&data, &train, &taus)?;
    let table = tau_table_to_text(&rows, train.stat);
    write_file(&out.join("tau_sweep.txt"), &table)?;
    Ok(table)
}

/// Resolves the configuration for a parsed command line and runs it.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Synth(a) => {
            let mut cfg = base_config(&a.common)?;
            set_opt(&mut cfg, "n_samples", a.n_samples);
            cmd_synth(&cfg)
        }
        Command::Train(a) => {
            let mut cfg = base_config(&a.common)?;
            apply_train_flags(&mut cfg, &a.train);
            set_opt(&mut cfg, "data", a.data.as_ref().map(|p| p.display()));
            cmd_train(&cfg)
        }
        Command::Eval(a) => {
            let mut cfg = base_config(&a.common)?;
            set_opt(&mut cfg, "data", a.data.as_ref().map(|p| p.display()));
            set_opt(
                &mut cfg,
                "checkpoints",
                a.checkpoints.as_ref().map(|p| p.display()),
            );
            set_opt(&mut cfg, "split", a.split.as_ref());
            set_opt(&mut cfg, "tau", a.tau.map(|t| format!("{t:?}")));
            set_opt(&mut cfg, "stat", a.stat.as_ref());
            cmd_eval(&cfg)
        }
        Command::Infer(a) => {
            let mut cfg = base_config(&a.common)?;
            set_opt(
                &mut cfg,
                "checkpoints",
                a.checkpoints.as_ref().map(|p| p.display()),
            );
            set_opt(&mut cfg, "image", a.image.as_ref().map(|p| p.display()));
            set_opt(&mut cfg, "tau", a.tau.map(|t| format!("{t:?}")));
            set_opt(&mut cfg, "stat", a.stat.as_ref());
            cmd_infer(&cfg)
        }
        Command::SweepTau(a) => {
            let mut cfg = base_config(&a.common)?;
            apply_train_flags(&mut cfg, &a.train);
            set_opt(&mut cfg, "data", a.data.as_ref().map(|p| p.display()));
            set_opt(&mut cfg, "taus", a.taus.as_ref());
            cmd_sweep_tau(&cfg)
        }
    }
}

/// Exit code for an error: [`EXIT_USAGE`] for bad input, [`EXIT_RUNTIME`]
/// otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_usage() {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

/// Full entry point: parses `args` (program name first), runs the command,
/// prints its output or a diagnostic, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            print!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("agcnn: error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests;
