//! Segmentation and multi-label classification metrics.
//!
//! All counts are integers, so accumulation order cannot change any result.

use ndarray::Array2;

use crate::masking::LabelSet;

/// Ground-truth value for pixels excluded from every metric.
pub const IGNORE_LABEL: u8 = 255;

/// Row = ground truth class, column = predicted class. An extra final column
/// counts pixels whose prediction is the ignore/background value while the
/// ground truth is a real class (possible in background_class mode).
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    num_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { counts: Array2::zeros((num_classes, num_classes + 1)), num_classes }
    }

    /// Accumulates one image pair. Pixels with ground truth IGNORE_LABEL are
    /// skipped entirely.
    pub fn update(&mut self, gt: &Array2<u8>, pred: &Array2<u8>) {
        assert_eq!(gt.dim(), pred.dim(), "mask shapes must match");
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            if g == IGNORE_LABEL {
                continue;
            }
            let g = g as usize;
            assert!(g < self.num_classes, "ground truth class {g} out of range");
            let col = if p == IGNORE_LABEL {
                self.num_classes
            } else {
                let p = p as usize;
                assert!(p < self.num_classes, "predicted class {p} out of range");
                p
            };
            self.counts[(g, col)] += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        self.counts += &other.counts;
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts.row(c).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.column(c).sum()
    }

    /// IoU for one class, None when the class appears in neither ground truth
    /// nor prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.counts[(c, c)];
        let union = self.row_sum(c) + self.col_sum(c) - tp;
        if union == 0 {
            None
        } else {
            Some(tp as f64 / union as f64)
        }
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    /// Fraction of counted pixels predicted correctly.
    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.sum();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.num_classes).map(|c| self.counts[(c, c)]).sum();
        correct as f64 / total as f64
    }

    pub fn total_pixels(&self) -> u64 {
        self.counts.sum()
    }
}

/// Per-class true/false positive and false negative counts for multi-label
/// image classification.
#[derive(Debug, Clone)]
pub struct MultiLabelCounts {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl MultiLabelCounts {
    pub fn new(num_classes: usize) -> Self {
        MultiLabelCounts { tp: vec![0; num_classes], fp: vec![0; num_classes], fn_: vec![0; num_classes] }
    }

    pub fn update(&mut self, truth: &LabelSet, predicted: &LabelSet) {
        for c in 0..self.tp.len() {
            match (truth.contains(c), predicted.contains(c)) {
                (true, true) => self.tp[c] += 1,
                (false, true) => self.fp[c] += 1,
                (true, false) => self.fn_[c] += 1,
                (false, false) => {}
            }
        }
    }

    /// F1 for one class, None when the class never occurs in truth or
    /// prediction.
    pub fn f1(&self, c: usize) -> Option<f64> {
        let denom = 2 * self.tp[c] + self.fp[c] + self.fn_[c];
        if denom == 0 {
            None
        } else {
            Some(2.0 * self.tp[c] as f64 / denom as f64)
        }
    }

    /// Unweighted mean F1 over classes with any support; classes absent from
    /// both truth and prediction are excluded.
    pub fn macro_f1(&self) -> f64 {
        let scores: Vec<f64> = (0..self.tp.len()).filter_map(|c| self.f1(c)).collect();
        if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    }
}
