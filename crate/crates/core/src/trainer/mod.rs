//! Stage-wise training of the three branches.
//!
//! Each stage trains some parameter sets against the summed BCE losses of
//! some heads while everything else is frozen. Frozen branches run in eval
//! mode, so neither their parameters nor their running statistics change.
//! After every epoch the validation mean AUC of the stage's most
//! downstream head is recorded, and at the end of the stage the best epoch
//! is restored before the next stage starts.

mod config;

pub use config::{StagePlan, Strategy, TrainConfig};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::attention::{BoundingBox, HeatStat};
use crate::data::{
    augment, dataset_mean, AugmentMode, Dataset, EvalSet, GrayImage, Split, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::gradcore::{SgdState, Tape, Tensor};
use crate::metrics::{evaluate, Branch};
use crate::model::{
    local_inputs, AgCnn, BranchModel, Checkpoint, CheckpointHeader, FusionHead, Mode,
    CHECKPOINT_VERSION,
};
use crate::rng;

/// Training images, validation (and optionally test) sets, and the
/// training-split pixel mean used for centring.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train_images: Vec<GrayImage>,
    pub train_labels: Vec<[f64; NUM_CLASSES]>,
    pub val: EvalSet,
    pub test: Option<EvalSet>,
    pub mean: f64,
}

impl TrainData {
    pub fn from_dataset(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        let train: Vec<_> = dataset.split(Split::Train).collect();
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mean = dataset_mean(train.iter().map(|s| &s.image))?;
        let val = EvalSet::from_dataset(dataset, Split::Val, config.sizes, mean)?;
        let test = match dataset.count(Split::Test) {
            0 => None,
            _ => Some(EvalSet::from_dataset(
                dataset,
                Split::Test,
                config.sizes,
                mean,
            )?),
        };
        Ok(TrainData {
            train_images: train.iter().map(|s| s.image.clone()).collect(),
            train_labels: train.iter().map(|s| s.labels.as_f64()).collect(),
            val,
            test,
            mean,
        })
    }

    pub fn len(&self) -> usize {
        self.train_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-batch objective over the epoch.
    pub train_loss: f64,
    /// `None` when no pathology class has both label values in the
    /// validation set.
    pub val_mean_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    /// One-based stage number.
    pub stage: usize,
    pub plan: StagePlan,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub checkpoint: Option<PathBuf>,
}

impl StageReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    /// Header line, then one `stage,epoch,lr,train_loss,val_mean_auc`
    /// record per epoch.
    pub fn to_text(&self) -> String {
        let names = |v: &[Branch]| v.iter().map(|b| b.as_str()).collect::<Vec<_>>().join("+");
        let mut out = format!(
            "# stage={} trainable={} losses={} selection={} best_epoch={}\nstage,epoch,lr,train_loss,val_mean_auc\n",
            self.stage,
            names(&self.plan.trainable),
            names(&self.plan.losses),
            self.plan.selection_head(),
            self.best_epoch
        );
        for e in &self.epochs {
            let auc = e
                .val_mean_auc
                .map_or("skipped".to_string(), |a| a.to_string());
            writeln!(
                out,
                "{},{},{},{},{auc}",
                self.stage, e.epoch, e.lr, e.train_loss
            )
            .unwrap();
        }
        out
    }
}

/// Emitted once per training iteration in stages that compute crops.
#[derive(Debug, Clone)]
pub struct CropEvent {
    pub stage: usize,
    pub epoch: usize,
    pub iteration: usize,
    /// Checksum of the global branch that produced the crops.
    pub global_checksum: u64,
    /// Indices into the training set, in batch order.
    pub samples: Vec<usize>,
    /// Crop boxes in augmented-input coordinates.
    pub boxes: Vec<BoundingBox>,
}

pub type Observer<'a> = Box<dyn FnMut(&CropEvent) + 'a>;

/// Runs training stages over owned models.
pub struct Trainer<'a> {
    config: TrainConfig,
    output: Option<PathBuf>,
    observer: Option<Observer<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            output: None,
            observer: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Writes `stage{k}.ckpt` and `stage{k}.txt` into `dir` after each stage.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output = Some(dir.into());
        self
    }

    pub fn with_observer(mut self, observer: impl FnMut(&CropEvent) + 'a) -> Self {
        self.observer = Some(Box::new(observer));
        self
    }

    /// Fresh models for this configuration.
    pub fn init_models(&self) -> Result<AgCnn> {
        AgCnn::new(self.config.backbone.clone(), self.config.seed)
    }

    /// Trains fresh models with the configured strategy.
    pub fn train(&mut self, data: &TrainData) -> Result<(AgCnn, Vec<StageReport>)> {
        let mut models = self.init_models()?;
        let reports = self.train_models(&mut models, data)?;
        Ok((models, reports))
    }

    /// Runs every stage of the configured strategy on `models`.
    ///
    /// When the fusion head is first trained after earlier stages have
    /// trained a branch, it starts from the average of the two branch
    /// classifiers rather than from its random initialization.
    pub fn train_models(
        &mut self,
        models: &mut AgCnn,
        data: &TrainData,
    ) -> Result<Vec<StageReport>> {
        let plans = self.config.strategy.stages();
        let mut reports = Vec::with_capacity(plans.len());
        for (i, plan) in plans.into_iter().enumerate() {
            if i > 0
                && plan.trains(Branch::Fusion)
                && reports
                    .iter()
                    .all(|r: &StageReport| !r.plan.trains(Branch::Fusion))
            {
                models.fusion = FusionHead::from_branches(&models.global, &models.local)?;
            }
            reports.push(self.run_stage(models, data, i + 1, plan)?);
        }
        Ok(reports)
    }

    /// Trains `plan` on `models`, restores the best epoch and, when an
    /// output directory is set, writes the stage checkpoint and report.
    pub fn run_stage(
        &mut self,
        models: &mut AgCnn,
        data: &TrainData,
        stage: usize,
        plan: StagePlan,
    ) -> Result<StageReport> {
        if data.is_empty() || data.val.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let cfg = self.config.clone();
        models.global.set_trainable(plan.trains(Branch::Global));
        models.local.set_trainable(plan.trains(Branch::Local));
        models.fusion.set_trainable(plan.trains(Branch::Fusion));
        let new_sgd = || SgdState::new(cfg.base_lr, cfg.momentum, cfg.weight_decay);
        let (mut sgd_g, mut sgd_l, mut sgd_f) = (new_sgd()?, new_sgd()?, new_sgd()?);

        let needs_local =
            plan.trains(Branch::Local) || plan.scores(Branch::Local) || plan.scores(Branch::Fusion);
        let batch_size = plan.batch_size(&cfg);
        let selection = plan.selection_head();
        let mode_of = |b: Branch| {
            if plan.trains(b) {
                Mode::Train
            } else {
                Mode::Eval
            }
        };

        let mut epochs = Vec::with_capacity(cfg.epochs_per_stage);
        let mut best: Option<(usize, Option<f64>, AgCnn)> = None;
        for epoch in 0..cfg.epochs_per_stage {
            let lr = cfg.learning_rate(epoch);
            for s in [&mut sgd_g, &mut sgd_l, &mut sgd_f] {
                s.learning_rate = lr;
            }
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng::stream(
                cfg.seed,
                &format!("stage{stage}.epoch{epoch}.order"),
            ));
            let mut aug_rng = rng::stream(cfg.seed, &format!("stage{stage}.epoch{epoch}.augment"));

            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for (iteration, idx) in order.chunks(batch_size).enumerate() {
                let inputs: Vec<Tensor> = idx
                    .iter()
                    .map(|&i| {
                        augment(
                            &data.train_images[i],
                            AugmentMode::Train,
                            cfg.sizes,
                            data.mean,
                            &mut aug_rng,
                        )
                    })
                    .collect::<Result<_>>()?;
                let images = Tensor::stack(&inputs)?;
                let labels = Tensor::new(
                    vec![idx.len(), NUM_CLASSES],
                    idx.iter().flat_map(|&i| data.train_labels[i]).collect(),
                )?;

                let mut tape = Tape::new();
                let x = tape.constant(images.clone());
                let g = models
                    .global
                    .forward(&mut tape, x, mode_of(Branch::Global))?;
                let mut objective = None;
                let mut add_loss = |tape: &mut Tape, logits| -> Result<()> {
                    let l = tape.bce_with_logits(logits, &labels)?;
                    objective = Some(match objective {
                        None => l,
                        Some(acc) => tape.add(acc, l)?,
                    });
                    Ok(())
                };
                if plan.scores(Branch::Global) {
                    add_loss(&mut tape, g.logits)?;
                }
                let mut local_vars = None;
                let mut fusion_vars = None;
                if needs_local {
                    let (crops, regions) =
                        local_inputs(tape.value(g.last_conv), &images, cfg.tau, cfg.stat)?;
                    if let Some(obs) = self.observer.as_mut() {
                        obs(&CropEvent {
                            stage,
                            epoch,
                            iteration,
                            global_checksum: models.global.checksum(),
                            samples: idx.to_vec(),
                            boxes: regions.iter().map(|r| r.bbox).collect(),
                        });
                    }
                    let c = tape.constant(crops);
                    let l = models.local.forward(&mut tape, c, mode_of(Branch::Local))?;
                    if plan.scores(Branch::Local) {
                        add_loss(&mut tape, l.logits)?;
                    }
                    if plan.scores(Branch::Fusion) {
                        let f = models.fusion.forward(&mut tape, g.pooled, l.pooled)?;
                        add_loss(&mut tape, f.logits)?;
                        fusion_vars = Some(f);
                    }
                    local_vars = Some(l);
                }
                let objective = objective.expect("every stage has a loss");
                let loss_value = tape.value(objective).item();
                if !loss_value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage,
                        epoch,
                        iteration,
                    });
                }
                let mut grads = tape.backward(objective)?;
                if plan.trains(Branch::Global) {
                    models.global.store_gradients(&g, &mut grads)?;
                    sgd_g.step(&mut models.global.params_mut())?;
                }
                if let (true, Some(l)) = (plan.trains(Branch::Local), &local_vars) {
                    models.local.store_gradients(l, &mut grads)?;
                    sgd_l.step(&mut models.local.params_mut())?;
                }
                if let (true, Some(f)) = (plan.trains(Branch::Fusion), &fusion_vars) {
                    models.fusion.store_gradients(f, &mut grads)?;
                    sgd_f.step(&mut models.fusion.params_mut())?;
                }
                loss_sum += loss_value;
                batches += 1;
            }

            let eval = evaluate(models, &data.val, cfg.tau, cfg.stat)?;
            let val_mean_auc = eval.mean(selection);
            epochs.push(EpochRecord {
                epoch,
                lr,
                train_loss: loss_sum / batches as f64,
                val_mean_auc,
            });
            let improves = match (best.as_ref().map(|b| b.1), val_mean_auc) {
                (None, _) => true,
                // nothing evaluable so far: keep the latest weights
                (Some(None), _) => true,
                (Some(Some(b)), Some(a)) => a > b,
                (Some(Some(_)), None) => false,
            };
            if improves {
                best = Some((epoch, val_mean_auc, models.clone()));
            }
        }
        let (best_epoch, _, best_models) = best.expect("at least one epoch");
        for b in &plan.trainable {
            match b {
                Branch::Global => models.global = best_models.global.clone(),
                Branch::Local => models.local = best_models.local.clone(),
                Branch::Fusion => models.fusion = best_models.fusion.clone(),
            }
        }
        models.global.set_trainable(false);
        models.local.set_trainable(false);
        models.fusion.set_trainable(false);

        let mut report = StageReport {
            stage,
            plan,
            epochs,
            best_epoch,
            checkpoint: None,
        };
        if let Some(dir) = &self.output {
            report.checkpoint = Some(write_stage(dir, &cfg, data.mean, models, &report)?);
        }
        Ok(report)
    }
}

fn write_stage(
    dir: &Path,
    cfg: &TrainConfig,
    mean: f64,
    models: &AgCnn,
    report: &StageReport,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        backbone: cfg.backbone.clone(),
        tau: cfg.tau,
        stat: cfg.stat,
        strategy: cfg.strategy.to_string(),
        mean,
        sizes: cfg.sizes,
    };
    let path = dir.join(format!("stage{}.ckpt", report.stage));
    Checkpoint::from_models(header, models, &report.plan.trainable).save(&path)?;
    let txt = dir.join(format!("stage{}.txt", report.stage));
    std::fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))?;
    Ok(path)
}

/// Loads `stage1.ckpt`, `stage2.ckpt`, ... from `dir` in order, later files
/// overriding earlier ones, onto fresh models built from the first header.
pub fn load_stage_checkpoints(dir: impl AsRef<Path>) -> Result<(AgCnn, CheckpointHeader)> {
    let dir = dir.as_ref();
    let mut models: Option<AgCnn> = None;
    let mut header = None;
    for k in 1.. {
        let path = dir.join(format!("stage{k}.ckpt"));
        if !path.exists() {
            break;
        }
        let ckpt = Checkpoint::load(&path)?;
        let m = match &mut models {
            Some(m) => m,
            None => models.insert(AgCnn::new(ckpt.header.backbone.clone(), 0)?),
        };
        ckpt.apply(m)?;
        header = Some(ckpt.header);
    }
    match (models, header) {
        (Some(m), Some(h)) => Ok((m, h)),
        _ => Err(Error::Checkpoint(format!(
            "no stage1.ckpt in {}",
            dir.display()
        ))),
    }
}

fn single_stage(
    config: &TrainConfig,
    plan: StagePlan,
    models: &mut AgCnn,
    data: &TrainData,
    stage: usize,
) -> Result<StageReport> {
    Trainer::new(config.clone())?.run_stage(models, data, stage, plan)
}

/// Stage I: the global branch alone.
pub fn train_stage_global(
    data: &TrainData,
    config: &TrainConfig,
) -> Result<(BranchModel, StageReport)> {
    let mut models = AgCnn::new(config.backbone.clone(), config.seed)?;
    let plan = StagePlan {
        trainable: vec![Branch::Global],
        losses: vec![Branch::Global],
    };
    let report = single_stage(config, plan, &mut models, data, 1)?;
    Ok((models.global, report))
}

/// Stage II: the local branch on crops from a frozen global branch.
pub fn train_stage_local(
    data: &TrainData,
    global: &BranchModel,
    config: &TrainConfig,
) -> Result<(BranchModel, StageReport)> {
    let mut models = AgCnn::new(config.backbone.clone(), config.seed)?;
    models.global = global.clone();
    let plan = StagePlan {
        trainable: vec![Branch::Local],
        losses: vec![Branch::Local],
    };
    let report = single_stage(config, plan, &mut models, data, 2)?;
    Ok((models.local, report))
}

/// Stage III: the fusion head on frozen global and local branches, warm
/// started from their classifiers.
pub fn train_stage_fusion(
    data: &TrainData,
    global: &BranchModel,
    local: &BranchModel,
    config: &TrainConfig,
) -> Result<(FusionHead, StageReport)> {
    let mut models = AgCnn::new(config.backbone.clone(), config.seed)?;
    models.global = global.clone();
    models.local = local.clone();
    models.fusion = FusionHead::from_branches(global, local)?;
    let plan = StagePlan {
        trainable: vec![Branch::Fusion],
        losses: vec![Branch::Fusion],
    };
    let report = single_stage(config, plan, &mut models, data, 3)?;
    Ok((models.fusion, report))
}

/// Trains fresh models under `strategy`.
pub fn train(
    strategy: Strategy,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<(AgCnn, Vec<StageReport>)> {
    let config = TrainConfig {
        strategy,
        ..config.clone()
    };
    Trainer::new(config)?.train(data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauRow {
    pub tau: f64,
    pub global: Option<f64>,
    pub local: Option<f64>,
    pub fusion: Option<f64>,
}

/// `tau,global,local,fusion` table.
pub fn tau_table_to_text(rows: &[TauRow], stat: HeatStat) -> String {
    let mut out = format!("# stat={stat}\ntau,global,local,fusion\n");
    let f = |v: Option<f64>| v.map_or("skipped".to_string(), |a| a.to_string());
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.tau,
            f(r.global),
            f(r.local),
            f(r.fusion)
        )
        .unwrap();
    }
    out
}

/// Trains the global branch once, then for each τ retrains the local branch
/// and fusion head from their initial weights and evaluates all three
/// branches on the test set.
pub fn sweep_tau(data: &TrainData, config: &TrainConfig, taus: &[f64]) -> Result<Vec<TauRow>> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument(
            "tau sweep needs at least one value".into(),
        ));
    }
    if let Some(t) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("tau {t} outside [0, 1]")));
    }
    let test = data
        .test
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("tau sweep needs a test split".into()))?;
    config.validate()?;
    let (global, _) = train_stage_global(data, config)?;
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let cfg = TrainConfig {
            tau,
            ..config.clone()
        };
        let (local, _) = train_stage_local(data, &global, &cfg)?;
        let (fusion, _) = train_stage_fusion(data, &global, &local, &cfg)?;
        let models = AgCnn {
            global: global.clone(),
            local,
            fusion,
        };
        let eval = evaluate(&models, test, tau, cfg.stat)?;
        rows.push(TauRow {
            tau,
            global: eval.mean(Branch::Global),
            local: eval.mean(Branch::Local),
            fusion: eval.mean(Branch::Fusion),
        });
    }
    Ok(rows)
}
