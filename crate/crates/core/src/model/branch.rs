use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::gradcore::{
    checksum_all, sigmoid, BatchNormMode, Gradients, RunningStats, Tape, Tensor, Var,
};
use crate::rng;

/// Shape of a block-structured backbone. Every block is a 3×3 convolution
/// (padding 1), batch normalization, ReLU and a 2×2 max pool with stride 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
}

impl BackboneConfig {
    /// Three blocks for 64×64 single-channel inputs.
    pub fn desk() -> Self {
        BackboneConfig {
            in_channels: 1,
            image_size: 64,
            widths: vec![8, 16, 32],
        }
    }

    /// Shapes of the full-size network: five down-sampling blocks ending in
    /// 2048 channels on a 7×7 grid for 224×224 RGB inputs.
    pub fn reference() -> Self {
        BackboneConfig {
            in_channels: 3,
            image_size: 224,
            widths: vec![64, 256, 512, 1024, 2048],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a backbone needs at least 2 blocks, got {}",
                self.widths.len()
            )));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "channel counts must be positive".into(),
            ));
        }
        let mut side = self.image_size;
        for i in 0..self.widths.len() {
            if side < 2 {
                return Err(Error::shape(
                    "build_branch",
                    "H",
                    format!(
                        "feature map collapses below 1x1 at block {i} for input {}",
                        self.image_size
                    ),
                ));
            }
            side /= 2;
        }
        Ok(())
    }

    /// Side of the last convolutional feature map.
    pub fn feature_size(&self) -> usize {
        self.widths.iter().fold(self.image_size, |s, _| s / 2)
    }

    /// Channels of the last feature map, which is also the pooled dimension.
    pub fn pooled_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

impl fmt::Display for BackboneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<String> = self.widths.iter().map(ToString::to_string).collect();
        write!(
            f,
            "in={};size={};widths={}",
            self.in_channels,
            self.image_size,
            widths.join(",")
        )
    }
}

impl FromStr for BackboneConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid backbone description {s:?}"));
        let (mut in_channels, mut image_size, mut widths) = (None, None, None);
        for part in s.split(';') {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            match k.trim() {
                "in" => in_channels = Some(v.trim().parse().map_err(|_| bad())?),
                "size" => image_size = Some(v.trim().parse().map_err(|_| bad())?),
                "widths" => {
                    widths = Some(
                        v.split(',')
                            .map(|w| w.trim().parse::<usize>().map_err(|_| bad()))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                _ => return Err(bad()),
            }
        }
        let cfg = BackboneConfig {
            in_channels: in_channels.ok_or_else(bad)?,
            image_size: image_size.ok_or_else(bad)?,
            widths: widths.ok_or_else(bad)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Whether batch normalization uses batch statistics (and updates its
/// running estimates) or the stored running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBlock {
    weight: Tensor,
    bias: Tensor,
    gamma: Tensor,
    beta: Tensor,
}

/// Vars recorded by one branch forward pass.
#[derive(Debug, Clone)]
pub struct BranchVars {
    pub logits: Var,
    pub pooled: Var,
    pub last_conv: Var,
    params: Vec<Var>,
}

/// Eager branch outputs.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// `[N, 15]`
    pub logits: Tensor,
    /// `[N, 15]`, sigmoid of the logits.
    pub probabilities: Tensor,
    /// `[N, D]`
    pub pooled: Tensor,
    /// `[N, K, h, w]`
    pub last_conv: Tensor,
}

/// One classification branch: convolutional blocks, global max pooling
/// and a 15-way affine classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchModel {
    config: BackboneConfig,
    blocks: Vec<ConvBlock>,
    running: Vec<RunningStats>,
    classifier_weight: Tensor,
    classifier_bias: Tensor,
}

pub(crate) fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), values).expect("consistent size")
}

impl BranchModel {
    /// Builds a branch with He-normal weights drawn from the stream named
    /// `name` under `seed`; biases and shifts start at zero, scales at one.
    pub fn new(config: BackboneConfig, seed: u64, name: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, name);
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut running = Vec::with_capacity(config.widths.len());
        let mut cin = config.in_channels;
        for &cout in &config.widths {
            blocks.push(ConvBlock {
                weight: he_normal(&[cout, cin, 3, 3], cin * 9, &mut rng).with_requires_grad(true),
                bias: Tensor::zeros(&[cout]).with_requires_grad(true),
                gamma: Tensor::full(&[cout], 1.0).with_requires_grad(true),
                beta: Tensor::zeros(&[cout]).with_requires_grad(true),
            });
            running.push(RunningStats::new(cout));
            cin = cout;
        }
        let d = config.pooled_dim();
        Ok(BranchModel {
            classifier_weight: he_normal(&[NUM_CLASSES, d], d, &mut rng).with_requires_grad(true),
            classifier_bias: Tensor::zeros(&[NUM_CLASSES]).with_requires_grad(true),
            config,
            blocks,
            running,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &self.blocks {
            out.extend([&b.weight, &b.bias, &b.gamma, &b.beta]);
        }
        out.extend([&self.classifier_weight, &self.classifier_bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.extend([&mut b.weight, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        out.extend([&mut self.classifier_weight, &mut self.classifier_bias]);
        out
    }

    /// Every persisted tensor (parameters and running statistics) with its
    /// name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (b, r)) in self.blocks.iter().zip(&self.running).enumerate() {
            out.push((format!("block{i}.conv.weight"), &b.weight));
            out.push((format!("block{i}.conv.bias"), &b.bias));
            out.push((format!("block{i}.bn.gamma"), &b.gamma));
            out.push((format!("block{i}.bn.beta"), &b.beta));
            out.push((format!("block{i}.bn.running_mean"), &r.mean));
            out.push((format!("block{i}.bn.running_var"), &r.var));
        }
        out.push(("classifier.weight".into(), &self.classifier_weight));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (b, r)) in self.blocks.iter_mut().zip(&mut self.running).enumerate() {
            out.push((format!("block{i}.conv.weight"), &mut b.weight));
            out.push((format!("block{i}.conv.bias"), &mut b.bias));
            out.push((format!("block{i}.bn.gamma"), &mut b.gamma));
            out.push((format!("block{i}.bn.beta"), &mut b.beta));
            out.push((format!("block{i}.bn.running_mean"), &mut r.mean));
            out.push((format!("block{i}.bn.running_var"), &mut r.var));
        }
        out.push(("classifier.weight".into(), &mut self.classifier_weight));
        out.push(("classifier.bias".into(), &mut self.classifier_bias));
        out
    }

    /// Checksum over parameters and running statistics.
    pub fn checksum(&self) -> u64 {
        checksum_all(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(trainable);
            p.zero_grad();
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.classifier_weight.requires_grad()
    }

    /// Classifier weight `[15, D]` and bias `[15]`.
    pub fn classifier(&self) -> (&Tensor, &Tensor) {
        (&self.classifier_weight, &self.classifier_bias)
    }

    /// Replaces the classifier weights, e.g. to build test fixtures.
    pub fn set_classifier(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        if weight.shape() != self.classifier_weight.shape()
            || bias.shape() != self.classifier_bias.shape()
        {
            return Err(Error::shape(
                "set_classifier",
                "D",
                format!(
                    "expected {:?} and {:?}, got {:?} and {:?}",
                    self.classifier_weight.shape(),
                    self.classifier_bias.shape(),
                    weight.shape(),
                    bias.shape()
                ),
            ));
        }
        let rg = self.classifier_weight.requires_grad();
        self.classifier_weight = weight.with_requires_grad(rg);
        self.classifier_bias = bias.with_requires_grad(rg);
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 {
            return Err(Error::shape(
                "forward_branch",
                "ndim",
                format!("expected [N,C,H,W], got {shape:?}"),
            ));
        }
        if shape[1] != c.in_channels {
            return Err(Error::shape(
                "forward_branch",
                "C",
                format!("expected {} channels, got {}", c.in_channels, shape[1]),
            ));
        }
        if shape[2] != c.image_size || shape[3] != c.image_size {
            return Err(Error::shape(
                "forward_branch",
                "H",
                format!(
                    "expected {0}x{0} images, got {1}x{2}",
                    c.image_size, shape[2], shape[3]
                ),
            ));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. Train mode updates running
    /// statistics. Parameters enter the tape as leaves that track
    /// gradients exactly when they are trainable.
    pub fn forward(&mut self, tape: &mut Tape, images: Var, mode: Mode) -> Result<BranchVars> {
        match mode {
            Mode::Train => {
                let BranchModel { running, .. } = self;
                let mut running = std::mem::take(running);
                let out = self.record(tape, images, Some(&mut running));
                self.running = running;
                out
            }
            Mode::Eval => self.forward_eval(tape, images),
        }
    }

    /// Eval-mode forward pass; a pure function of parameters and input.
    pub fn forward_eval(&self, tape: &mut Tape, images: Var) -> Result<BranchVars> {
        self.record(tape, images, None)
    }

    fn record(
        &self,
        tape: &mut Tape,
        images: Var,
        mut train: Option<&mut Vec<RunningStats>>,
    ) -> Result<BranchVars> {
        self.check_input(tape.value(images).shape())?;
        let mut params = Vec::with_capacity(4 * self.blocks.len() + 2);
        let mut x = images;
        for (i, block) in self.blocks.iter().enumerate() {
            let w = tape.leaf(block.weight.clone());
            let b = tape.leaf(block.bias.clone());
            let g = tape.leaf(block.gamma.clone());
            let be = tape.leaf(block.beta.clone());
            params.extend([w, b, g, be]);
            x = tape.conv2d(x, w, b, 1, 1)?;
            let mode = match train.as_deref_mut() {
                Some(stats) => BatchNormMode::Train(&mut stats[i]),
                None => BatchNormMode::Eval(&self.running[i]),
            };
            x = tape.batch_norm(x, g, be, mode)?;
            x = tape.relu(x);
            x = tape.max_pool2d(x, 2, 2, 2)?;
        }
        let last_conv = x;
        let pooled = tape.global_max_pool(last_conv)?;
        let w = tape.leaf(self.classifier_weight.clone());
        let b = tape.leaf(self.classifier_bias.clone());
        params.extend([w, b]);
        let logits = tape.affine(pooled, w, b)?;
        Ok(BranchVars {
            logits,
            pooled,
            last_conv,
            params,
        })
    }

    /// Stores the gradients of this branch's trainable parameters from a
    /// backward pass over a tape recorded with [`BranchModel::forward`].
    pub fn store_gradients(&mut self, vars: &BranchVars, grads: &mut Gradients) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(&vars.params) {
            if p.requires_grad() {
                // unreached parameters (a classifier whose head is not in
                // the objective) have an exactly zero gradient
                let g = grads.take(v).unwrap_or_else(|| vec![0.0; p.numel()]);
                p.set_grad(g)?;
            }
        }
        Ok(())
    }

    /// Eager eval-mode forward pass on `[N, C, H, W]` images.
    pub fn infer(&self, images: &Tensor) -> Result<BranchOutput> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let vars = self.forward_eval(&mut tape, x)?;
        Ok(collect_output(&tape, &vars))
    }

    /// Eager forward pass in either mode. Train mode updates the running
    /// statistics.
    pub fn forward_branch(&mut self, images: &Tensor, mode: Mode) -> Result<BranchOutput> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let vars = self.forward(&mut tape, x, mode)?;
        Ok(collect_output(&tape, &vars))
    }
}

fn collect_output(tape: &Tape, vars: &BranchVars) -> BranchOutput {
    let logits = tape.value(vars.logits).clone();
    BranchOutput {
        probabilities: sigmoid(&logits),
        logits,
        pooled: tape.value(vars.pooled).clone(),
        last_conv: tape.value(vars.last_conv).clone(),
    }
}
