//! Reference implementations written independently of the production code
//! paths: plain loops, full sorts and explicit sets.

use std::collections::BTreeSet;

use crate::mesh::Vec3;

/// All-pairs KNN: full sort of every row by (squared distance, index).
pub fn brute_force_knn(x: &[f64], m: usize, d: usize, k: usize, include_self: bool) -> Vec<Vec<usize>> {
    (0..m)
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..m)
                .filter(|&j| include_self || j != i)
                .map(|j| {
                    let mut s = 0.0;
                    for c in 0..d {
                        let diff = x[i * d + c] - x[j * d + c];
                        s += diff * diff;
                    }
                    (s, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// OA, per-class IoU and mIoU from explicit cell-index sets.
pub fn set_metrics(classes: usize, truth: &[usize], pred: &[usize]) -> (f64, Vec<Option<f64>>, f64) {
    let correct = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    let iou: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
            let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
            let union = t.union(&p).count();
            (union > 0).then(|| t.intersection(&p).count() as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    (correct as f64 / truth.len() as f64, iou, miou)
}

/// Rotation about a unit axis (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn rotate(r: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i] += r[i][j] * v[j];
        }
    }
    out
}

/// Cross-entropy of one row computed directly from the definition.
pub fn cross_entropy_row(logits: &[f64], label: usize) -> f64 {
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    -(logits[label].exp() / z).ln()
}
