use std::fmt;
use std::str::FromStr;

use crate::attention::{HeatStat, DEFAULT_TAU};
use crate::data::AugmentSizes;
use crate::error::{Error, Result};
use crate::metrics::Branch;
use crate::model::BackboneConfig;

/// Order in which the three parameter sets are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Strategy {
    /// Global, then local, then fusion, each with the earlier sets frozen.
    #[default]
    GLF3,
    /// As [`Strategy::GLF3`], but the last stage fine-tunes all three sets.
    GLF3Star,
    /// Global, then local and fusion jointly.
    GThenLF,
    /// Global and local jointly, then fusion.
    GLThenF,
    /// All three jointly in a single stage.
    Joint,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::GLF3,
        Strategy::GLF3Star,
        Strategy::GThenLF,
        Strategy::GLThenF,
        Strategy::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::GLF3 => "G_L_F",
            Strategy::GLF3Star => "G_L_F_star",
            Strategy::GThenLF => "G_LF",
            Strategy::GLThenF => "GL_F",
            Strategy::Joint => "GLF",
        }
    }

    /// Stage plans in execution order.
    pub fn stages(self) -> Vec<StagePlan> {
        use Branch::{Fusion as F, Global as G, Local as L};
        let plan = |trainable: &[Branch], losses: &[Branch]| StagePlan {
            trainable: trainable.to_vec(),
            losses: losses.to_vec(),
        };
        match self {
            Strategy::GLF3 => vec![plan(&[G], &[G]), plan(&[L], &[L]), plan(&[F], &[F])],
            Strategy::GLF3Star => vec![plan(&[G], &[G]), plan(&[L], &[L]), plan(&[G, L, F], &[F])],
            Strategy::GThenLF => vec![plan(&[G], &[G]), plan(&[L, F], &[L, F])],
            Strategy::GLThenF => vec![plan(&[G, L], &[G, L]), plan(&[F], &[F])],
            Strategy::Joint => vec![plan(&[G, L, F], &[G, L, F])],
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "G_L_F" => Ok(Strategy::GLF3),
            "G_L_F_star" | "G_L_F*" => Ok(Strategy::GLF3Star),
            "G_LF" => Ok(Strategy::GThenLF),
            "GL_F" => Ok(Strategy::GLThenF),
            "GLF" => Ok(Strategy::Joint),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected G_L_F, G_L_F_star, G_LF, GL_F or GLF)"
            ))),
        }
    }
}

/// Which parameter sets update in a stage and which heads' losses are
/// summed into the objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub trainable: Vec<Branch>,
    pub losses: Vec<Branch>,
}

impl StagePlan {
    pub fn trains(&self, b: Branch) -> bool {
        self.trainable.contains(&b)
    }

    pub fn scores(&self, b: Branch) -> bool {
        self.losses.contains(&b)
    }

    /// The head whose validation mean AUC selects the best epoch: the
    /// most downstream head in the objective.
    pub fn selection_head(&self) -> Branch {
        [Branch::Fusion, Branch::Local, Branch::Global]
            .into_iter()
            .find(|b| self.losses.contains(b))
            .expect("every stage has a loss")
    }

    /// Single batch size used by the stage.
    pub fn batch_size(&self, config: &TrainConfig) -> usize {
        match (self.trainable.as_slice(), self.losses.as_slice()) {
            ([Branch::Global], [Branch::Global]) => config.batch_global,
            ([Branch::Local], [Branch::Local]) => config.batch_local,
            ([Branch::Fusion], [Branch::Fusion]) => config.batch_fusion,
            _ => config.batch_joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub stat: HeatStat,
    pub strategy: Strategy,
    pub epochs_per_stage: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// First (zero-based) epoch trained at the decayed rate.
    pub lr_decay_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_global: usize,
    pub batch_local: usize,
    pub batch_fusion: usize,
    /// Batch size for stages that train several parameter sets together.
    pub batch_joint: usize,
    pub seed: u64,
    pub sizes: AugmentSizes,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Settings for 64×64 synthetic data on a single CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            tau: DEFAULT_TAU,
            stat: HeatStat::MaxAbs,
            strategy: Strategy::GLF3,
            epochs_per_stage: 10,
            base_lr: 0.01,
            lr_decay_factor: 10.0,
            lr_decay_epoch: 6,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_global: 16,
            batch_local: 16,
            batch_fusion: 16,
            batch_joint: 16,
            seed: 0,
            sizes: AugmentSizes::DESK,
            backbone: BackboneConfig::desk(),
        }
    }

    /// Full-scale settings: 224×224 crops of 256×256 images, 50 epochs per
    /// stage with the rate divided by 10 after 20, batch sizes 126/64/64.
    pub fn reference() -> Self {
        TrainConfig {
            epochs_per_stage: 50,
            lr_decay_epoch: 20,
            batch_global: 126,
            batch_local: 64,
            batch_fusion: 64,
            batch_joint: 64,
            sizes: AugmentSizes::REFERENCE,
            backbone: BackboneConfig::reference(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if self.epochs_per_stage == 0 {
            return bad("epochs_per_stage must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad(format!(
                "lr_decay_factor {} must be positive",
                self.lr_decay_factor
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if [
            self.batch_global,
            self.batch_local,
            self.batch_fusion,
            self.batch_joint,
        ]
        .contains(&0)
        {
            return bad("batch sizes must be at least 1".into());
        }
        self.sizes
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.sizes.crop != self.backbone.image_size {
            return bad(format!(
                "crop size {} differs from backbone input size {}",
                self.sizes.crop, self.backbone.image_size
            ));
        }
        self.backbone
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Step schedule: `base_lr` before `lr_decay_epoch`, divided by the
    /// decay factor from then on.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch < self.lr_decay_epoch {
            self.base_lr
        } else {
            self.base_lr / self.lr_decay_factor
        }
    }
}
