//! Confusion-matrix accumulation and the segmentation metrics derived from
//! it: pixel accuracy and mean intersection-over-union.

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// How classes absent from both prediction and ground truth enter the mean.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AbsentClassPolicy {
    /// Skip absent classes (avoids 0/0); the default.
    Exclude,
    /// Count absent classes as zero IoU over all K classes.
    CountAsZero,
}

/// Square pixel-count matrix: rows are ground truth, columns predictions.
/// Pixels labeled with the ignore value are dropped from the counts but
/// tallied separately so totals stay auditable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    pub ignored_pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes], ignored_pixels: 0 }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), num_classes * num_classes);
        ConfusionMatrix { num_classes, counts, ignored_pixels: 0 }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total_counted(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one batch of prediction/ground-truth maps.
    pub fn update(&mut self, pred: &LabelMap, truth: &LabelMap, ignore: u8) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (truth.n, truth.h, truth.w) {
            return Err(Error::shape(
                "cm_update",
                format!(
                    "prediction ({},{},{}) and ground truth ({},{},{}) disagree",
                    pred.n, pred.h, pred.w, truth.n, truth.h, truth.w
                ),
            ));
        }
        for (p, t) in pred.data().iter().zip(truth.data()) {
            if *t == ignore {
                self.ignored_pixels += 1;
                continue;
            }
            let (p, t) = (*p as usize, *t as usize);
            if t >= self.num_classes {
                return Err(Error::invalid(
                    "cm_update",
                    format!("ground-truth class {t} outside [0,{})", self.num_classes),
                ));
            }
            if p >= self.num_classes {
                return Err(Error::invalid(
                    "cm_update",
                    format!("predicted class {p} outside [0,{})", self.num_classes),
                ));
            }
            self.counts[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Elementwise merge; sharded evaluation sums into one matrix.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "merge requires equal class counts");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored_pixels += other.ignored_pixels;
    }

    /// Pixel accuracy: diagonal mass over total mass.
    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total_counted();
        if total == 0 {
            return Err(Error::invalid("pixel_accuracy", "confusion matrix is empty"));
        }
        let diag: u64 = (0..self.num_classes).map(|i| self.count(i, i)).sum();
        Ok(diag as f64 / total as f64)
    }

    /// Per-class IoU (None when the class is absent from both prediction and
    /// ground truth) and the mean under the given policy.
    pub fn mean_iou(&self, policy: AbsentClassPolicy) -> Result<(f64, Vec<Option<f64>>)> {
        if self.total_counted() == 0 {
            return Err(Error::invalid("mean_iou", "confusion matrix is empty"));
        }
        let k = self.num_classes;
        let mut per_class = Vec::with_capacity(k);
        for i in 0..k {
            let row: u64 = (0..k).map(|j| self.count(i, j)).sum();
            let col: u64 = (0..k).map(|j| self.count(j, i)).sum();
            let diag = self.count(i, i);
            let union = row + col - diag;
            per_class.push(if union == 0 { None } else { Some(diag as f64 / union as f64) });
        }
        let mean = match policy {
            AbsentClassPolicy::Exclude => {
                let present: Vec<f64> = per_class.iter().flatten().copied().collect();
                if present.is_empty() {
                    return Err(Error::invalid("mean_iou", "no class present in the matrix"));
                }
                present.iter().sum::<f64>() / present.len() as f64
            }
            AbsentClassPolicy::CountAsZero => {
                per_class.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / k as f64
            }
        };
        Ok((mean, per_class))
    }
}
