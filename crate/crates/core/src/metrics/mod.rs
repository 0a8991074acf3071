//! ROC curves, trapezoidal AUC and per-branch reports.
//!
//! Tied scores are grouped at a single threshold, so the trapezoid over a
//! tie group contributes half credit for every tied positive/negative pair.
//! The resulting area equals the Mann–Whitney probability
//! `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.

use std::fmt::{self, Write as _};

use crate::attention::HeatStat;
use crate::data::{EvalSet, FINDINGS, NUM_PATHOLOGIES};
use crate::error::{Error, Result};
use crate::model::{AgCnn, Prediction};

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0,0)` to `(1,1)`, nondecreasing in both.
    pub points: Vec<(f64, f64)>,
    /// Score threshold reached at each point; `+∞` for the origin.
    pub thresholds: Vec<f64>,
    // cumulative (false positive, true positive) counts per point
    counts: Vec<(u64, u64)>,
    positives: u64,
    negatives: u64,
}

impl RocCurve {
    pub fn positives(&self) -> u64 {
        self.positives
    }

    pub fn negatives(&self) -> u64 {
        self.negatives
    }
}

/// Builds the ROC curve by sweeping thresholds over distinct scores in
/// descending order.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedCurve);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let mut counts = vec![(0, 0)];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
        thresholds.push(threshold);
        counts.push((fp, tp));
    }
    Ok(RocCurve {
        points,
        thresholds,
        counts,
        positives,
        negatives,
    })
}

/// Trapezoidal area under the curve, accumulated on integer counts and
/// divided once, so it is exact up to a single rounding.
pub fn auc(curve: &RocCurve) -> f64 {
    let twice_area: u128 = curve
        .counts
        .windows(2)
        .map(|w| {
            let (fp0, tp0) = w[0];
            let (fp1, tp1) = w[1];
            u128::from(fp1 - fp0) * u128::from(tp0 + tp1)
        })
        .sum();
    twice_area as f64 / (2.0 * curve.positives as f64 * curve.negatives as f64)
}

pub fn auc_score(scores: &[f64], labels: &[bool]) -> Result<f64> {
    roc_curve(scores, labels).map(|c| auc(&c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Global,
    Local,
    Fusion,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Global, Branch::Local, Branch::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Local => "local",
            Branch::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAuc {
    pub name: &'static str,
    /// `None` when the split lacks positives or negatives for this class.
    pub auc: Option<f64>,
}

/// Per-class AUC over the pathology classes ("No Finding" is excluded)
/// and their mean over the classes that could be evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct AucReport {
    pub branch: Branch,
    pub tau: f64,
    pub stat: HeatStat,
    pub per_class: Vec<ClassAuc>,
    pub mean: Option<f64>,
}

impl AucReport {
    /// `scores[i][c]` is the probability of class `c` for sample `i`;
    /// `labels[i][c]` the ground truth. Only the first
    /// [`NUM_PATHOLOGIES`] columns are scored.
    pub fn from_scores(
        branch: Branch,
        tau: f64,
        stat: HeatStat,
        scores: &[Vec<f64>],
        labels: &[Vec<bool>],
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per_class = (0..NUM_PATHOLOGIES)
            .map(|c| {
                let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
                let l: Vec<bool> = labels.iter().map(|row| row[c]).collect();
                let auc = match auc_score(&s, &l) {
                    Ok(a) => Some(a),
                    Err(Error::UndefinedCurve) => None,
                    Err(e) => return Err(e),
                };
                Ok(ClassAuc {
                    name: FINDINGS[c],
                    auc,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = mean_auc(&per_class);
        Ok(AucReport {
            branch,
            tau,
            stat,
            per_class,
            mean,
        })
    }

    pub fn class_auc(&self, name: &str) -> Option<f64> {
        self.per_class
            .iter()
            .find(|c| c.name == name)
            .and_then(|c| c.auc)
    }

    /// `class_name,auc` per class (`skipped` when undefined), then
    /// `mean,<value>`. Values use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# branch={} tau={} stat={}",
            self.branch, self.tau, self.stat
        )
        .unwrap();
        for c in &self.per_class {
            match c.auc {
                Some(a) => writeln!(out, "{},{a}", c.name).unwrap(),
                None => writeln!(out, "{},skipped", c.name).unwrap(),
            }
        }
        match self.mean {
            Some(m) => writeln!(out, "mean,{m}").unwrap(),
            None => writeln!(out, "mean,skipped").unwrap(),
        }
        out
    }
}

pub(crate) fn mean_auc(per_class: &[ClassAuc]) -> Option<f64> {
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Reports for the three branches on one evaluation set, plus the raw
/// predictions they were computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reports: [AucReport; 3],
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn report(&self, branch: Branch) -> &AucReport {
        &self.reports[Branch::ALL.iter().position(|&b| b == branch).unwrap()]
    }

    pub fn mean(&self, branch: Branch) -> Option<f64> {
        self.report(branch).mean
    }
}

/// Samples per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

/// Runs the full pipeline over `set` and scores each branch.
pub fn evaluate(models: &AgCnn, set: &EvalSet, tau: f64, stat: HeatStat) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut predictions = Vec::with_capacity(set.len());
    for start in (0..set.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(set.len());
        predictions.extend(models.predict_batch(&set.batch(start..end)?, tau, stat)?);
    }
    let labels: Vec<Vec<bool>> = set.labels.iter().map(|l| l.bits().to_vec()).collect();
    let report = |branch: Branch| {
        let scores: Vec<Vec<f64>> = predictions
            .iter()
            .map(|p| p.branch(branch).to_vec())
            .collect();
        AucReport::from_scores(branch, tau, stat, &scores, &labels)
    };
    Ok(Evaluation {
        reports: [
            report(Branch::Global)?,
            report(Branch::Local)?,
            report(Branch::Fusion)?,
        ],
        predictions,
    })
}

/// `fpr,tpr` lines for one curve.
pub fn curve_to_text(curve: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (fpr, tpr) in &curve.points {
        writeln!(out, "{fpr},{tpr}").unwrap();
    }
    out
}
