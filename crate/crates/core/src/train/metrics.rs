//! Confusion-matrix metrics: mIoU, overall accuracy and mean F1.

use serde::Serialize;

use crate::error::{Error, Result};

/// Counts with rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::dim("confusion matrix must be square"));
        }
        Ok(Self {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("cannot merge confusion matrices of different sizes"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
        (tp, col - tp, row - tp)
    }

    /// `TP/(TP+FP+FN)`; `None` when the class is absent from both truth and
    /// prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(c);
        let d = tp + fp + fn_;
        (d > 0).then(|| tp as f64 / d as f64)
    }

    /// `2TP/(2TP+FP+FN)`; `None` when the class is absent from both.
    pub fn f1(&self, c: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(c);
        let d = 2 * tp + fp + fn_;
        (d > 0).then(|| 2.0 * tp as f64 / d as f64)
    }

    fn mean_present(&self, f: impl Fn(usize) -> Option<f64>) -> f64 {
        let vals: Vec<f64> = (0..self.classes).filter_map(f).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn mean_iou(&self) -> f64 {
        self.mean_present(|c| self.iou(c))
    }

    pub fn mean_f1(&self) -> f64 {
        self.mean_present(|c| self.f1(c))
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            accuracy: self.overall_accuracy(),
            miou: self.mean_iou(),
            mean_f1: self.mean_f1(),
            confusion: self.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Overall accuracy (trace / total).
    pub accuracy: f64,
    pub miou: f64,
    pub mean_f1: f64,
    pub confusion: ConfusionMatrix,
}
