//! One-pass evaluation: run the tracker once from the first-frame box,
//! then score the whole trajectory. Success is the AUC of the overlap
//! curve (fraction of frames whose IoU clears a threshold swept over
//! [0, 1] in 0.05 steps), Precision the AUC of the center-distance curve
//! (thresholds [0, 2] m in 0.1 m steps), both scaled to [0, 100] with
//! trapezoidal integration.

use crate::geometry::{iou3d, OrientedBox3D};
use anyhow::{bail, Result};

/// Scores of one predicted trajectory against ground truth.
#[derive(Debug, Clone)]
pub struct OpeResult {
    /// Overlap AUC in [0, 100].
    pub success: f64,
    /// Center-distance AUC in [0, 100].
    pub precision: f64,
    pub ious: Vec<f64>,
    /// Euclidean center errors, meters.
    pub center_errors: Vec<f64>,
}

/// Float guard on threshold comparisons. Measured overlaps carry polygon
/// clipping round-off (a box against itself can score 1 − 1e-16), while
/// the swept thresholds are exact decimals; the guard is vastly below the
/// 0.05 threshold spacing, so it only stabilizes boundary cases.
const EDGE: f64 = 1e-9;

/// Overlap curve samples (threshold, fraction of frames). The τ = 0 sample
/// counts strictly positive overlaps so that a total miss scores zero;
/// every later sample counts IoU ≥ τ so that a perfect run scores one
/// across the whole sweep.
pub fn success_curve(ious: &[f64]) -> Vec<(f64, f64)> {
    let n = ious.len().max(1) as f64;
    (0..=20)
        .map(|i| {
            let tau = i as f64 * 0.05;
            let hits = if i == 0 {
                ious.iter().filter(|v| **v > 0.0).count()
            } else {
                ious.iter().filter(|v| **v >= tau - EDGE).count()
            };
            (tau, hits as f64 / n)
        })
        .collect()
}

/// Distance curve samples (threshold m, fraction with error ≤ threshold).
pub fn precision_curve(errors: &[f64]) -> Vec<(f64, f64)> {
    let n = errors.len().max(1) as f64;
    (0..=20)
        .map(|i| {
            let d = i as f64 * 0.1;
            let hits = errors.iter().filter(|v| **v <= d + EDGE).count();
            (d, hits as f64 / n)
        })
        .collect()
}

/// Trapezoidal AUC of a monotone threshold sweep, normalized by the swept
/// range and scaled to [0, 100].
pub fn auc(curve: &[(f64, f64)]) -> f64 {
    if curve.len() < 2 {
        return 0.0;
    }
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    let range = curve.last().unwrap().0 - curve[0].0;
    100.0 * area / range
}

pub fn center_distance(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let d = [
        a.center[0] - b.center[0],
        a.center[1] - b.center[1],
        a.center[2] - b.center[2],
    ];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

pub fn evaluate_ope(pred: &[OrientedBox3D], gt: &[OrientedBox3D]) -> Result<OpeResult> {
    if pred.len() != gt.len() {
        bail!("trajectory length mismatch: {} predicted vs {} ground-truth", pred.len(), gt.len());
    }
    if pred.is_empty() {
        bail!("cannot evaluate an empty trajectory");
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou3d(p, g)).collect();
    let center_errors: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| center_distance(p, g)).collect();
    let success = auc(&success_curve(&ious));
    let precision = auc(&precision_curve(&center_errors));
    Ok(OpeResult { success, precision, ious, center_errors })
}

/// Evaluates several trajectory pairs, one thread per tracklet.
pub fn evaluate_many(
    pairs: &[(Vec<OrientedBox3D>, Vec<OrientedBox3D>)],
) -> Result<Vec<OpeResult>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .iter()
            .map(|(p, g)| scope.spawn(move || evaluate_ope(p, g)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| bail!("evaluation worker panicked")))
            .collect()
    })
}
