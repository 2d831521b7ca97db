//! Classification, segmentation and normal-estimation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Per-class true positive, false positive and false negative counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, fp, fn_ }
    }

    /// `None` for a class that never occurs in labels or predictions.
    pub fn iou(&self) -> Option<f64> {
        let d = self.tp + self.fp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

/// Mean IoU over the non-empty classes; 0 when every class is empty.
pub fn mean_iou(counts: &[ClassCounts]) -> f64 {
    let ious: Vec<f64> = counts.iter().filter_map(ClassCounts::iou).collect();
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// `m[gt][pred]` counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    m: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            m: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.m[gt * self.classes + pred] += 1;
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.m[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.m.iter().sum()
    }

    pub fn class_counts(&self) -> Vec<ClassCounts> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
                ClassCounts::new(tp, col - tp, row - tp)
            })
            .collect()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / t as f64
    }

    /// Mean recall over classes present in the ground truth.
    pub fn mean_accuracy(&self) -> f64 {
        let accs: Vec<f64> = self
            .class_counts()
            .iter()
            .filter(|c| c.tp + c.fn_ > 0)
            .map(|c| c.tp as f64 / (c.tp + c.fn_) as f64)
            .collect();
        if accs.is_empty() {
            0.0
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        }
    }

    pub fn mean_iou(&self) -> f64 {
        mean_iou(&self.class_counts())
    }
}

/// Index of the largest entry of each row, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean unoriented angle in degrees between predicted and true normals.
pub fn normal_angle_error(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.shape().len() != 2 || pred.shape()[1] != 3 {
        return dim_err(format!("normals {:?} vs {:?}", pred.shape(), gt.shape()));
    }
    let n = pred.shape()[0];
    let total: f64 = pred
        .data()
        .chunks(3)
        .zip(gt.data().chunks(3))
        .map(|(p, g)| {
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            (dot.abs() / (np * ng).max(1e-300)).min(1.0).acos().to_degrees()
        })
        .sum();
    Ok(total / n.max(1) as f64)
}
