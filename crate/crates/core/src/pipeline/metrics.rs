use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::etf::NcReport;

/// Pixel counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { counts: vec![vec![0; num_classes]; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn accumulate(&mut self, prediction: &[usize], truth: &[usize]) -> Result<()> {
        if prediction.len() != truth.len() {
            return Err(CoreError::UnsupportedDimension(format!("{} predictions for {} labels", prediction.len(), truth.len())));
        }
        let c = self.num_classes();
        if let Some(&bad) = prediction.iter().chain(truth).find(|&&k| k >= c) {
            return Err(CoreError::InvalidLabel(format!("class {bad} outside [0, {c})")));
        }
        for (&p, &t) in prediction.iter().zip(truth) {
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    pub fn truth_counts(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class is absent from
    /// both prediction and truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes();
        (0..c)
            .map(|k| {
                let tp = self.counts[k][k];
                let fn_: u64 = self.counts[k].iter().sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|t| self.counts[t][k]).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        mean_iou(&self.iou())
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.truth_counts().iter().sum();
        let correct: u64 = (0..self.num_classes()).map(|k| self.counts[k][k]).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

pub fn mean_iou(iou: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub confusion: ConfusionMatrix,
    /// Neural-collapse metrics (ETF head only).
    pub nc: Option<NcReport>,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix, nc: Option<NcReport>) -> Self {
        let per_class_iou = confusion.iou();
        Self { miou: mean_iou(&per_class_iou), pixel_accuracy: confusion.pixel_accuracy(), per_class_iou, confusion, nc }
    }
}
