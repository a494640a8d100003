//! Confusion-matrix accumulation and mean intersection-over-union.

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// K x K pixel-count table; rows index ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Spec("confusion matrix needs at least one class".into()));
        }
        Ok(Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Total evaluated (non-ignored) pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds another matrix of the same shape; merging shards is commutative
    /// and lossless.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::Shape(format!(
                "cannot merge confusion matrices of {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Accumulates `cm[gt][pred] += 1` for every non-ignored pixel.
pub fn update_confusion(
    cm: &mut ConfusionMatrix,
    pred: &LabelMap,
    gt: &LabelMap,
    ignore_index: u32,
) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let k = cm.num_classes as u32;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == ignore_index {
            continue;
        }
        if g >= k {
            return Err(Error::Dataset(format!(
                "ground-truth label {g} is outside [0, {k}) and is not the ignore index {ignore_index}"
            )));
        }
        if p >= k {
            return Err(Error::Dataset(format!(
                "predicted label {p} is outside [0, {k})"
            )));
        }
        cm.counts[(g * k + p) as usize] += 1;
    }
    Ok(())
}

/// Per-class IoU and the mean over classes that appear in either prediction
/// or ground truth. Classes absent from both are excluded from the mean.
#[derive(Clone, Debug, serde::Serialize)]
pub struct IouReport {
    /// `None` for classes with an empty union.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let k = cm.num_classes;
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for cls in 0..k {
        let tp = cm.count(cls, cls);
        let row: u64 = (0..k).map(|j| cm.count(cls, j)).sum();
        let col: u64 = (0..k).map(|i| cm.count(i, cls)).sum();
        let union = row + col - tp;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Numeric(
            "every class has an empty union; mIoU is undefined".into(),
        ));
    }
    Ok(IouReport {
        per_class,
        mean: sum / counted as f64,
    })
}

impl IouReport {
    pub fn render_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>8}", "class", "IoU");
        for (cls, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => {
                    let _ = writeln!(s, "{cls:<8} {v:>8.4}");
                }
                None => {
                    let _ = writeln!(s, "{cls:<8} {:>8}", "absent");
                }
            }
        }
        let _ = writeln!(s, "{:<8} {:>8.4}", "mIoU", self.mean);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_gives_miou_one() {
        let gt = LabelMap::new([1, 2, 2], vec![0, 1, 2, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(3).unwrap();
        update_confusion(&mut cm, &gt, &gt, 255).unwrap();
        let report = miou(&cm).unwrap();
        assert_eq!(report.mean, 1.0);
        assert!(report.per_class.iter().all(|c| *c == Some(1.0)));
    }

    #[test]
    fn half_right_two_class_example() {
        // gt half class0 / half class1, prediction all class0:
        // IoU0 = 0.5, IoU1 = 0, mIoU = 0.25
        let gt = LabelMap::new([1, 1, 4], vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::filled([1, 1, 4], 0);
        let mut cm = ConfusionMatrix::new(2).unwrap();
        update_confusion(&mut cm, &pred, &gt, 255).unwrap();
        let report = miou(&cm).unwrap();
        assert_eq!(report.per_class[0], Some(0.5));
        assert_eq!(report.per_class[1], Some(0.0));
        assert_eq!(report.mean, 0.25);
    }

    #[test]
    fn hand_enumerated_update() {
        let gt = LabelMap::new([1, 2, 2], vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new([1, 2, 2], vec![0, 1, 1, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(2).unwrap();
        update_confusion(&mut cm, &pred, &gt, 255).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 0);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn ignored_pixels_leave_matrix_unchanged() {
        let gt = LabelMap::filled([1, 2, 2], 255);
        let pred = LabelMap::filled([1, 2, 2], 1);
        let mut cm = ConfusionMatrix::new(2).unwrap();
        update_confusion(&mut cm, &pred, &gt, 255).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(miou(&cm).is_err());
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let gt = LabelMap::filled([1, 1, 1], 9);
        let pred = LabelMap::filled([1, 1, 1], 0);
        let mut cm = ConfusionMatrix::new(2).unwrap();
        assert!(update_confusion(&mut cm, &pred, &gt, 255).is_err());
    }

    #[test]
    fn merge_is_addition() {
        let gt = LabelMap::new([1, 1, 2], vec![0, 1]).unwrap();
        let pred = LabelMap::new([1, 1, 2], vec![0, 0]).unwrap();
        let mut a = ConfusionMatrix::new(2).unwrap();
        update_confusion(&mut a, &pred, &gt, 255).unwrap();
        let mut b = a.clone();
        b.merge(&a).unwrap();
        assert_eq!(b.total(), 2 * a.total());
        assert_eq!(b.count(1, 0), 2);
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        let gt = LabelMap::new([1, 1, 2], vec![0, 0]).unwrap();
        let pred = LabelMap::new([1, 1, 2], vec![0, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(4).unwrap();
        update_confusion(&mut cm, &pred, &gt, 255).unwrap();
        let report = miou(&cm).unwrap();
        assert_eq!(report.per_class[0], Some(1.0));
        assert_eq!(report.per_class[1], None);
        assert_eq!(report.mean, 1.0);
    }
}
