//! The three classification branches.
//!
//! The global and local branches share an architecture ([`BackboneConfig`])
//! but never share parameter storage. The fusion head classifies the
//! concatenation `(pooled_global, pooled_local)`. Every head produces 15
//! logits whose sigmoid gives the per-class probabilities.

mod branch;
mod checkpoint;

pub use branch::{BackboneConfig, BranchModel, BranchOutput, BranchVars, Mode};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};

use crate::attention::{infer_local_region, BoundingBox, HeatMap, HeatStat, LocalRegion};
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::gradcore::{checksum_all, sigmoid, Gradients, Tape, Tensor, Var};
use crate::rng;

/// Affine classifier over concatenated global and local pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    weight: Tensor,
    bias: Tensor,
}

/// Vars recorded by a fusion forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub logits: Var,
    weight: Var,
    bias: Var,
}

impl FusionHead {
    /// He-normal weights over `2 * pooled_dim` inputs, zero bias.
    pub fn new(pooled_dim: usize, seed: u64, name: &str) -> Result<Self> {
        if pooled_dim == 0 {
            return Err(Error::InvalidArgument(
                "pooled dimension must be positive".into(),
            ));
        }
        let fan_in = 2 * pooled_dim;
        Ok(FusionHead {
            weight: branch::he_normal(&[NUM_CLASSES, fan_in], fan_in, &mut rng::stream(seed, name))
                .with_requires_grad(true),
            bias: Tensor::zeros(&[NUM_CLASSES]).with_requires_grad(true),
        })
    }

    /// Builds a head from explicit `[15, 2D]` weights and `[15]` bias.
    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || ws[0] != NUM_CLASSES || !ws[1].is_multiple_of(2) || bias.shape() != [NUM_CLASSES]
        {
            return Err(Error::shape(
                "FusionHead::from_parts",
                "D",
                format!(
                    "expected [15, 2D] and [15], got {ws:?} and {:?}",
                    bias.shape()
                ),
            ));
        }
        Ok(FusionHead {
            weight: weight.with_requires_grad(true),
            bias: bias.with_requires_grad(true),
        })
    }

    /// Head whose logits start as the average of the two branch classifiers'
    /// logits: weight `[W_g / 2 | W_l / 2]`, bias `(b_g + b_l) / 2`.
    pub fn from_branches(global: &BranchModel, local: &BranchModel) -> Result<Self> {
        let (wg, bg) = global.classifier();
        let (wl, bl) = local.classifier();
        if wg.shape() != wl.shape() {
            return Err(Error::shape(
                "FusionHead::from_branches",
                "D",
                format!(
                    "global classifier {:?} vs local {:?}",
                    wg.shape(),
                    wl.shape()
                ),
            ));
        }
        let d = wg.shape()[1];
        let mut weight = Vec::with_capacity(NUM_CLASSES * 2 * d);
        for k in 0..NUM_CLASSES {
            weight.extend(wg.values()[k * d..(k + 1) * d].iter().map(|w| w / 2.0));
            weight.extend(wl.values()[k * d..(k + 1) * d].iter().map(|w| w / 2.0));
        }
        let bias = bg
            .values()
            .iter()
            .zip(bl.values())
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        Self::from_parts(
            Tensor::new(vec![NUM_CLASSES, 2 * d], weight)?,
            Tensor::new(vec![NUM_CLASSES], bias)?,
        )
    }

    /// Input width, `dim(pool_g) + dim(pool_l)`.
    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }

    pub fn checksum(&self) -> u64 {
        checksum_all(self.params())
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(trainable);
            p.zero_grad();
        }
    }

    /// Records `affine(concat(pool_g, pool_l))` on `tape`.
    pub fn forward(&self, tape: &mut Tape, pool_g: Var, pool_l: Var) -> Result<FusionVars> {
        let (dg, dl) = (
            tape.value(pool_g).shape().to_vec(),
            tape.value(pool_l).shape().to_vec(),
        );
        if dg.len() != 2 || dl.len() != 2 || dg[1] + dl[1] != self.input_dim() {
            return Err(Error::shape(
                "forward_fusion",
                "D",
                format!(
                    "head expects {} features, got {dg:?} + {dl:?}",
                    self.input_dim()
                ),
            ));
        }
        let x = tape.concat(pool_g, pool_l)?;
        let weight = tape.leaf(self.weight.clone());
        let bias = tape.leaf(self.bias.clone());
        let logits = tape.affine(x, weight, bias)?;
        Ok(FusionVars {
            logits,
            weight,
            bias,
        })
    }

    pub fn store_gradients(&mut self, vars: &FusionVars, grads: &mut Gradients) -> Result<()> {
        for (p, v) in [(&mut self.weight, vars.weight), (&mut self.bias, vars.bias)] {
            if p.requires_grad() {
                // unreached parameters (a classifier whose head is not in
                // the objective) have an exactly zero gradient
                let g = grads.take(v).unwrap_or_else(|| vec![0.0; p.numel()]);
                p.set_grad(g)?;
            }
        }
        Ok(())
    }

    /// Eager `sigmoid(affine(concat(pool_g, pool_l)))`, `[N, 15]`.
    pub fn probabilities(&self, pool_g: &Tensor, pool_l: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = tape.constant(pool_g.clone());
        let l = tape.constant(pool_l.clone());
        let vars = self.forward(&mut tape, g, l)?;
        Ok(sigmoid(tape.value(vars.logits)))
    }
}

/// Free-function form of [`FusionHead::probabilities`].
pub fn forward_fusion(head: &FusionHead, pool_g: &Tensor, pool_l: &Tensor) -> Result<Tensor> {
    head.probabilities(pool_g, pool_l)
}

/// Result of running the full pipeline on one image.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub global: [f64; NUM_CLASSES],
    pub local: [f64; NUM_CLASSES],
    pub fusion: [f64; NUM_CLASSES],
    pub pooled_global: Vec<f64>,
    pub pooled_local: Vec<f64>,
    /// Normalized heat map at input resolution.
    pub heat_map: HeatMap,
    pub bbox: BoundingBox,
    /// True when no pixel passed the threshold and the whole image was used.
    pub fallback: bool,
    /// `[C, H, W]` local branch input.
    pub local_image: Tensor,
}

impl Prediction {
    pub fn branch(&self, branch: crate::metrics::Branch) -> &[f64; NUM_CLASSES] {
        use crate::metrics::Branch;
        match branch {
            Branch::Global => &self.global,
            Branch::Local => &self.local,
            Branch::Fusion => &self.fusion,
        }
    }
}

fn row(t: &Tensor, n: usize) -> Vec<f64> {
    t.select(n).expect("row in range").into_values()
}

fn class_row(t: &Tensor, n: usize) -> [f64; NUM_CLASSES] {
    row(t, n).try_into().expect("15 classes")
}

/// Mask inference for a batch: one attended crop per image, resized to the
/// input size and stacked as `[N, C, H, W]`.
pub fn local_inputs(
    last_conv: &Tensor,
    images: &Tensor,
    tau: f64,
    stat: HeatStat,
) -> Result<(Tensor, Vec<LocalRegion>)> {
    let n = images.shape()[0];
    if last_conv.shape()[0] != n {
        return Err(Error::shape(
            "local_inputs",
            "N",
            format!("{} feature maps for {n} images", last_conv.shape()[0]),
        ));
    }
    let mut regions = Vec::with_capacity(n);
    for i in 0..n {
        let mut fshape = last_conv.shape().to_vec();
        fshape[0] = 1;
        let features = last_conv.select(i)?.reshape(fshape)?;
        regions.push(infer_local_region(
            &features,
            &images.select(i)?,
            tau,
            stat,
        )?);
    }
    let crops: Vec<Tensor> = regions.iter().map(|r| r.image.clone()).collect();
    Ok((Tensor::stack(&crops)?, regions))
}

/// The three branches used together.
#[derive(Debug, Clone, PartialEq)]
pub struct AgCnn {
    pub global: BranchModel,
    pub local: BranchModel,
    pub fusion: FusionHead,
}

impl AgCnn {
    /// Fresh models; each parameter set draws from its own named stream.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let global = BranchModel::new(config.clone(), seed, "global")?;
        let local = BranchModel::new(config.clone(), seed, "local")?;
        let fusion = FusionHead::new(config.pooled_dim(), seed, "fusion")?;
        Ok(AgCnn {
            global,
            local,
            fusion,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        self.global.config()
    }

    /// Runs the pipeline on a batch of preprocessed `[N, C, H, W]` images.
    pub fn predict_batch(
        &self,
        images: &Tensor,
        tau: f64,
        stat: HeatStat,
    ) -> Result<Vec<Prediction>> {
        predict_batch(&self.global, &self.local, &self.fusion, images, tau, stat)
    }

    /// Runs the pipeline on one preprocessed `[C, H, W]` image.
    pub fn predict(&self, image: &Tensor, tau: f64, stat: HeatStat) -> Result<Prediction> {
        predict(&self.global, &self.local, &self.fusion, image, tau, stat)
    }
}

/// Global forward, mask inference, local forward on the crops and fusion,
/// for a batch of preprocessed `[N, C, H, W]` images.
pub fn predict_batch(
    global: &BranchModel,
    local: &BranchModel,
    fusion: &FusionHead,
    images: &Tensor,
    tau: f64,
    stat: HeatStat,
) -> Result<Vec<Prediction>> {
    let g = global.infer(images)?;
    let (crops, regions) = local_inputs(&g.last_conv, images, tau, stat)?;
    let l = local.infer(&crops)?;
    let f = fusion.probabilities(&g.pooled, &l.pooled)?;
    Ok(regions
        .into_iter()
        .enumerate()
        .map(|(n, region)| Prediction {
            global: class_row(&g.probabilities, n),
            local: class_row(&l.probabilities, n),
            fusion: class_row(&f, n),
            pooled_global: row(&g.pooled, n),
            pooled_local: row(&l.pooled, n),
            heat_map: region.heat_map,
            bbox: region.bbox,
            fallback: region.fallback,
            local_image: region.image,
        })
        .collect())
}

/// Single-image form of [`predict_batch`] for a `[C, H, W]` image.
pub fn predict(
    global: &BranchModel,
    local: &BranchModel,
    fusion: &FusionHead,
    image: &Tensor,
    tau: f64,
    stat: HeatStat,
) -> Result<Prediction> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.clone().reshape(shape)?;
    Ok(predict_batch(global, local, fusion, &batch, tau, stat)?.remove(0))
}
