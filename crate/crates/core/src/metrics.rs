//! Voxel-wise evaluation metrics over binary masks.
//!
//! A ratio whose denominator is zero is reported as 1.0 when prediction and
//! ground truth agree everywhere (no false positives or negatives) and 0.0
//! otherwise; [`Scores::degenerate`] lists which ratios hit that case.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nifti::MaskVolume;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("mask extents differ: {0:?} vs {1:?}")]
    ExtentMismatch([usize; 3], [usize; 3]),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn clean(&self) -> bool {
        self.fp == 0 && self.fn_ == 0
    }

    fn ratio(&self, num: u64, den: u64) -> f64 {
        if den == 0 {
            if self.clean() {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

pub fn confusion(pred: &MaskVolume, gt: &MaskVolume) -> Result<ConfusionCounts, MetricsError> {
    if pred.extents() != gt.extents() {
        return Err(MetricsError::ExtentMismatch(pred.extents(), gt.extents()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// 2|X∩Y| / (|X| + |Y|).
pub fn dice(c: &ConfusionCounts) -> f64 {
    c.ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// |X∩Y| / |X∪Y|.
pub fn iou(c: &ConfusionCounts) -> f64 {
    c.ratio(c.tp, c.tp + c.fp + c.fn_)
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    c.ratio(c.tp + c.tn, c.total())
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    c.ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    c.ratio(c.tp, c.tp + c.fn_)
}

/// TN / (TN + FP).
pub fn specificity(c: &ConfusionCounts) -> f64 {
    c.ratio(c.tn, c.tn + c.fp)
}

/// TN / (TN + FN), an alternative specificity reported next to the standard one.
pub fn specificity_as_printed(c: &ConfusionCounts) -> f64 {
    c.ratio(c.tn, c.tn + c.fn_)
}

pub fn dice_score(x: &MaskVolume, y: &MaskVolume) -> Result<f64, MetricsError> {
    Ok(dice(&confusion(x, y)?))
}

pub fn iou_score(x: &MaskVolume, y: &MaskVolume) -> Result<f64, MetricsError> {
    Ok(iou(&confusion(x, y)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dice: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub specificity_as_printed: f64,
    /// Names of ratios whose denominator was zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

impl Scores {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let mut degenerate = Vec::new();
        let mut flag = |name: &str, den: u64| {
            if den == 0 {
                degenerate.push(name.to_string());
            }
        };
        flag("dice", 2 * c.tp + c.fp + c.fn_);
        flag("iou", c.tp + c.fp + c.fn_);
        flag("accuracy", c.total());
        flag("precision", c.tp + c.fp);
        flag("recall", c.tp + c.fn_);
        flag("specificity", c.tn + c.fp);
        flag("specificity_as_printed", c.tn + c.fn_);
        Scores {
            dice: dice(c),
            iou: iou(c),
            accuracy: accuracy(c),
            precision: precision(c),
            recall: recall(c),
            specificity: specificity(c),
            specificity_as_printed: specificity_as_printed(c),
            degenerate,
        }
    }

    /// Column-wise arithmetic mean; degenerate flags are dropped.
    pub fn mean(all: &[Scores]) -> Option<Scores> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        let avg = |f: fn(&Scores) -> f64| all.iter().map(f).sum::<f64>() / n;
        Some(Scores {
            dice: avg(|s| s.dice),
            iou: avg(|s| s.iou),
            accuracy: avg(|s| s.accuracy),
            precision: avg(|s| s.precision),
            recall: avg(|s| s.recall),
            specificity: avg(|s| s.specificity),
            specificity_as_printed: avg(|s| s.specificity_as_printed),
            degenerate: Vec::new(),
        })
    }
}
