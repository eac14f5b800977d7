//! Confusion-matrix metrics. Rows are predicted classes, columns true classes;
//! class 0 is "unchanged".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::ChangeLabelMap;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    /// Row-major `counts[pred * K + truth]`.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        assert!(rows.iter().all(|r| r.len() == k), "confusion matrix must be square");
        Self { num_classes: k, counts: rows.concat() }
    }

    pub fn get(&self, pred: usize, truth: usize) -> u64 {
        self.counts[pred * self.num_classes + truth]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.num_classes).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, j)).sum()
    }

    pub fn accumulate(&mut self, pred: &ChangeLabelMap, truth: &ChangeLabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let k = self.num_classes;
        if let Some(&bad) = pred.cells().iter().chain(truth.cells()).find(|&&v| v as usize >= k) {
            return Err(Error::InvalidLabel { label: bad as usize, max: k - 1 });
        }
        for (&p, &t) in pred.cells().iter().zip(truth.cells()) {
            self.counts[p as usize * k + t as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!("cannot merge {}-class and {}-class matrices", self.num_classes, other.num_classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("overall accuracy of an empty matrix"));
        }
        let diag: u64 = (0..self.num_classes).map(|i| self.get(i, i)).sum();
        Ok(diag as f64 / total as f64)
    }

    /// `None` where a class is absent from both prediction and truth.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|i| {
                let tp = self.get(i, i);
                let denom = self.row_sum(i) + self.col_sum(i) - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over defined classes.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::UndefinedMetric("mIoU with no defined class"));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Binary change precision, recall and F1 (classes ≥ 1 are "change"); 0/0 is 0.
    pub fn f1_bcd(&self) -> (f64, f64, f64) {
        let k = self.num_classes;
        let mut tp = 0;
        for i in 1..k {
            for j in 1..k {
                tp += self.get(i, j);
            }
        }
        let fp: u64 = (1..k).map(|i| self.get(i, 0)).sum();
        let fn_: u64 = (1..k).map(|j| self.get(0, j)).sum();
        (ratio(tp, tp + fp), ratio(tp, tp + fn_), ratio(2 * tp, 2 * tp + fp + fn_))
    }

    /// Class-averaged F1 over all classes; per-class 0/0 is 0.
    pub fn f1_clf(&self) -> f64 {
        let k = self.num_classes;
        let sum: f64 = (0..k)
            .map(|i| {
                let tp = self.get(i, i);
                let fp = self.row_sum(i) - tp;
                let fn_ = self.col_sum(i) - tp;
                ratio(2 * tp, 2 * tp + fp + fn_)
            })
            .sum();
        sum / k as f64
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let (precision_c, recall_c, f1_bcd) = self.f1_bcd();
        Ok(MetricsReport {
            oa: self.overall_accuracy()?,
            miou: self.miou()?,
            iou_per_class: self.iou_per_class(),
            precision_c,
            recall_c,
            f1_bcd,
            f1_clf: self.f1_clf(),
            pixel_total: self.total(),
        })
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub miou: f64,
    pub iou_per_class: Vec<Option<f64>>,
    pub precision_c: f64,
    pub recall_c: f64,
    pub f1_bcd: f64,
    pub f1_clf: f64,
    pub pixel_total: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}
