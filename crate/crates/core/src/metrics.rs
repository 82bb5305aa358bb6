//! Confusion-matrix segmentation metrics.

use crate::error::{DatrError, Result};
use crate::uda::IGNORE;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// Row = ground truth, column = prediction.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Accumulate one prediction/label pair; ignored labels are skipped.
    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(DatrError::Domain(format!(
                "prediction has {} pixels, labels {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(DatrError::Domain(format!("label {g} or prediction {p} outside {k} classes")));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    fn gt_total(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes].iter().sum()
    }

    fn pred_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.counts[g * self.classes + c]).sum()
    }

    /// IoU per class; `None` for classes absent from the ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let gt = self.gt_total(c);
                if gt == 0 {
                    return None;
                }
                let tp = self.counts[c * self.classes + c];
                let union = gt + self.pred_total(c) - tp;
                Some(tp as f64 / union as f64)
            })
            .collect()
    }

    /// Unweighted mean IoU over classes present in the ground truth.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..self.classes).map(|c| self.counts[c * self.classes + c]).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

/// mIoU of a single prediction/label pair.
pub fn miou(pred: &[u8], gt: &[u8], classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.update(pred, gt)?;
    Ok(cm.miou())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = [0, 1, 2, 1, 0];
        assert_eq!(miou(&gt, &gt, 3).unwrap(), 1.0);
    }

    #[test]
    fn binary_hand_case() {
        let pred = [0, 0, 0, 0];
        let gt = [0, 0, 1, 1];
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &gt).unwrap();
        assert_eq!(cm.iou(), vec![Some(0.5), Some(0.0)]);
        assert_eq!(cm.miou(), 0.25);
    }

    #[test]
    fn absent_classes_and_ignore() {
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&[0, 1, 3], &[0, 1, IGNORE]).unwrap();
        assert_eq!(cm.iou(), vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(cm.miou(), 1.0);
        assert!(cm.update(&[5], &[0]).is_err());
        assert!(cm.update(&[0, 1], &[0]).is_err());
    }
}
