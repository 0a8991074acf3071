//! Trains all three branches on a synthetic desk-scale dataset and prints
//! per-branch AUCs and localization quality on the test split.
//!
//! `cargo run --release --example desk_experiment -- [seed ...]`
//!
//! Environment overrides: `NOISE`, `NOD_I` and `PNE_I` (noise level and the
//! nodule/pneumonia intensities), `NOD_R` (max nodule radius), `LR`,
//! `EPOCHS` and `BATCH`.

use std::time::Instant;

use agcnn::attention::BoundingBox;
use agcnn::data::{generate_synthetic, SyntheticSpec, FINDINGS};
use agcnn::metrics::{evaluate, Branch};
use agcnn::trainer::{TrainConfig, TrainData, Trainer};

const NODULE: usize = 5;

/// Mean IoU between `gt` and every placement of a box with the same size
/// as `pred` inside a `w`×`h` image.
fn random_box_iou(pred: BoundingBox, gt: BoundingBox, w: usize, h: usize) -> f64 {
    let (bw, bh) = (pred.width(), pred.height());
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - bh {
        for x in 0..=w - bw {
            total += BoundingBox::new(x, y, x + bw - 1, y + bh - 1)
                .unwrap()
                .iou(&gt);
            count += 1;
        }
    }
    total / count as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn main() -> agcnn::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("seed"))
        .collect();
    let seeds = if seeds.is_empty() {
        vec![0, 1, 2]
    } else {
        seeds
    };
    for seed in seeds {
        let start = Instant::now();
        let mut spec = SyntheticSpec::desk(600, seed);
        let env = |k: &str| std::env::var(k).ok().map(|v| v.parse::<f64>().expect(k));
        if let Some(v) = env("NOISE") {
            spec.noise_level = v;
        }
        if let Some(v) = env("NOD_I") {
            spec.classes[0].intensity = v;
        }
        if let Some(v) = env("PNE_I") {
            spec.classes[1].intensity = v;
        }
        if let Some(v) = env("NOD_R") {
            spec.classes[0].radius_max = v as usize;
        }
        let dataset = generate_synthetic(&spec)?;
        let mut config = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        if let Some(v) = env("LR") {
            config.base_lr = v;
        }
        if let Some(v) = env("EPOCHS") {
            config.epochs_per_stage = v as usize;
            config.lr_decay_epoch = (v as usize * 6) / 10;
        }
        if let Some(v) = env("BATCH") {
            let b = v as usize;
            config.batch_global = b;
            config.batch_local = b;
            config.batch_fusion = b;
            config.batch_joint = b;
        }
        let data = TrainData::from_dataset(&dataset, &config)?;
        let (models, reports) = Trainer::new(config.clone())?.train(&data)?;
        for r in &reports {
            let aucs: Vec<String> = r
                .epochs
                .iter()
                .map(|e| {
                    format!(
                        "{:.3}/{:.3}",
                        e.train_loss,
                        e.val_mean_auc.unwrap_or(f64::NAN)
                    )
                })
                .collect();
            println!(
                "  stage {} best {}: {}",
                r.stage,
                r.best_epoch,
                aucs.join(" ")
            );
        }
        let test = data.test.as_ref().expect("test split");
        let eval = evaluate(&models, test, config.tau, config.stat)?;
        for b in Branch::ALL {
            let r = eval.report(b);
            println!(
                "seed {seed} {b:>6}: mean {:.4} nodule {:.4} pneumonia {:.4}",
                r.mean.unwrap_or(f64::NAN),
                r.class_auc(FINDINGS[NODULE]).unwrap_or(f64::NAN),
                r.class_auc(FINDINGS[6]).unwrap_or(f64::NAN)
            );
        }
        let (mut ious, mut baselines) = (Vec::new(), Vec::new());
        for (i, p) in eval.predictions.iter().enumerate() {
            let Some(lesion) = test.lesions[i].iter().find(|l| l.finding == Some(NODULE)) else {
                continue;
            };
            let pred = test.frame.crop_to_original(p.bbox);
            ious.push(pred.iou(&lesion.bbox));
            baselines.push(random_box_iou(
                pred,
                lesion.bbox,
                dataset.width,
                dataset.height,
            ));
        }
        let count = ious.len();
        println!(
            "seed {seed} iou: median {:.4} vs random {:.4} over {count} nodules; {:.1}s",
            median(ious),
            median(baselines),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
