//! Confusion matrices, IoU and the relative-to-oracle score.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::label::{LabelMap, IGNORE_INDEX};

/// `C × C` counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(invalid("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Adds the joint counts of `pred` against `gt`, skipping ignored `gt` pixels.
pub fn accumulate(cm: &mut ConfusionMatrix, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape {
            expected: vec![gt.height, gt.width],
            got: vec![pred.height, pred.width],
        });
    }
    let c = cm.num_classes;
    gt.check_classes(c)?;
    for (&g, &p) in gt.data.iter().zip(&pred.data) {
        if g == IGNORE_INDEX {
            continue;
        }
        if p as usize >= c {
            return Err(invalid(format!("prediction {p} out of range for {c} classes")));
        }
        cm.counts[g as usize * c + p as usize] += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn iou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let c = cm.num_classes;
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.get(k, k);
        let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
        let denom = row + col - tp;
        per_class.push(if denom == 0 { None } else { Some(tp as f64 / denom as f64) });
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(invalid("no class has a non-zero IoU denominator"));
    }
    let miou = included.iter().sum::<f64>() / included.len() as f64;
    Ok(IouReport { per_class, miou })
}

/// Generalization mIoU as a percentage of the oracle mIoU.
pub fn relative_generalization(gen_miou: f64, oracle_miou: f64) -> Result<f64> {
    if oracle_miou <= 0.0 || !oracle_miou.is_finite() {
        return Err(invalid(format!("oracle mIoU must be positive, got {oracle_miou}")));
    }
    Ok(100.0 * gen_miou / oracle_miou)
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Sample mean and (n − 1) standard deviation; zero spread for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One CSV line per class plus a trailing mIoU line, values in percent.
pub fn iou_csv(report: &IouReport, class_names: &[String]) -> String {
    let mut s = String::from("class,iou\n");
    for (name, v) in class_names.iter().zip(&report.per_class) {
        match v {
            Some(x) => s.push_str(&format!("{name},{:.4}\n", 100.0 * x)),
            None => s.push_str(&format!("{name},\n")),
        }
    }
    s.push_str(&format!("mIoU,{:.4}\n", 100.0 * report.miou));
    s
}
