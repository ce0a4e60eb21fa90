use serde::{Deserialize, Serialize};

use super::loss::QualityLabel;
use crate::error::{invalid, Result};

/// Maps ROI mean absolute error to a quality class through nine ascending thresholds.
///
/// label = 10 - #{i : error >= t_i}, so zero error gives 10 and any error at or above
/// the last threshold gives 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityOracle {
    thresholds: Vec<f64>,
}

impl QualityOracle {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.len() != 9 {
            return invalid(format!("oracle needs 9 thresholds, got {}", thresholds.len()));
        }
        if !(thresholds[0] > 0.0) || thresholds.windows(2).any(|w| !(w[1] > w[0])) || thresholds.iter().any(|t| !t.is_finite()) {
            return invalid("oracle thresholds must be positive, finite and strictly increasing");
        }
        Ok(QualityOracle { thresholds })
    }

    /// Places thresholds at the 10%, 20%, ..., 90% quantiles of calibration errors.
    pub fn calibrate(errors: &[f64]) -> Result<Self> {
        if errors.len() < 10 {
            return invalid("calibration needs at least 10 errors");
        }
        if errors.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return invalid("calibration errors must be finite and nonnegative");
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut t: Vec<f64> = (1..10)
            .map(|k| {
                let pos = k as f64 / 10.0 * (n - 1) as f64;
                let (lo, frac) = (pos.floor() as usize, pos.fract());
                let hi = (lo + 1).min(n - 1);
                sorted[lo] * (1.0 - frac) + sorted[hi] * frac
            })
            .collect();
        // Degenerate calibration sets can produce ties; keep the table strictly increasing.
        let floor = sorted[n - 1].max(1e-9) * 1e-9;
        if t[0] <= 0.0 {
            t[0] = floor;
        }
        for i in 1..t.len() {
            if t[i] <= t[i - 1] {
                t[i] = t[i - 1] + floor;
            }
        }
        QualityOracle::new(t)
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn label_for_error(&self, error: f64) -> QualityLabel {
        let exceeded = self.thresholds.iter().filter(|&&t| error >= t).count();
        QualityLabel::new((10 - exceeded) as u8).expect("label in range")
    }

    /// Mean absolute error over ROI pixels, mapped to a label.
    pub fn label(&self, pred: &[f32], gt: &[f32], roi: &[bool]) -> Result<QualityLabel> {
        Ok(self.label_for_error(roi_mae(pred, gt, roi)?))
    }
}

pub fn roi_mae(pred: &[f32], gt: &[f32], roi: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != roi.len() {
        return invalid("oracle inputs differ in size");
    }
    let (mut s, mut n) = (0.0, 0usize);
    for ((p, g), &r) in pred.iter().zip(gt).zip(roi) {
        if r {
            s += (*p as f64 - *g as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return invalid("empty roi");
    }
    Ok(s / n as f64)
}
