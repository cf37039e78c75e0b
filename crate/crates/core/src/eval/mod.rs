//! Confusion matrix, overall accuracy and intersection-over-union.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `C × C` counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Add one cell per position. Nothing is counted if any entry is
    /// invalid.
    pub fn accumulate(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Data(format!(
                "{} predictions for {} labeled cells",
                pred.len(),
                truth.len()
            )));
        }
        let c = self.classes;
        if let Some((i, (&p, &t))) = pred
            .iter()
            .zip(truth)
            .enumerate()
            .find(|(_, (&p, &t))| p >= c || t >= c)
        {
            return Err(Error::Data(format!(
                "cell {i}: truth {t}, prediction {p}; classes are 0..{c}"
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Usage(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Usage("no cells were evaluated".into()));
        }
        let c = self.classes;
        let iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let truth: u64 = (0..c).map(|p| self.get(k, p)).sum();
                let pred: u64 = (0..c).map(|t| self.get(t, k)).sum();
                let union = truth + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = iou.iter().flatten().copied().collect();
        Ok(Metrics {
            overall_accuracy: self.trace() as f64 / total as f64,
            mean_iou: defined.iter().sum::<f64>() / defined.len() as f64,
            iou,
        })
    }
}

/// `iou[c]` is `None` when class `c` appears in neither truth nor
/// prediction; such classes are left out of `mean_iou`.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub iou: Vec<Option<f64>>,
    pub mean_iou: f64,
}

impl Metrics {
    pub fn undefined_classes(&self) -> Vec<usize> {
        self.iou
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(c, _)| c)
            .collect()
    }
}

/// Display name of a class: background, then teeth.
pub fn class_name(class: usize) -> String {
    if class == 0 {
        "BG".to_string()
    } else {
        format!("T{class}")
    }
}

/// Tab-separated report: one `class, name, iou` row per class (`NA` for
/// undefined), then `OA` and `mIoU` summary lines.
pub fn format_report(m: &Metrics) -> String {
    let mut s = String::from("class\tname\tiou\n");
    for (c, v) in m.iou.iter().enumerate() {
        let v = v.map_or("NA".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "{c}\t{}\t{v}", class_name(c));
    }
    let _ = writeln!(s, "OA\t\t{:.6}", m.overall_accuracy);
    let _ = writeln!(s, "mIoU\t\t{:.6}", m.mean_iou);
    let undefined = m.undefined_classes();
    if !undefined.is_empty() {
        let list: Vec<String> = undefined.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "undefined\t\t{}", list.join(","));
    }
    s
}
