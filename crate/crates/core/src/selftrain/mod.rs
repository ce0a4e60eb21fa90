//! Self-training of the MAR student on unpaired clinical data with CQA-gated
//! pseudo ground-truths from an EMA teacher.

pub mod batch;
pub mod ema;
pub mod loss;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use batch::Batch;
pub use ema::ema_update;
pub use loss::{assess_pseudo, build_pseudo_pairs, cli_loss, masked_l1, masked_l1_per_sample, sim_loss, total_loss, CliLoss, PseudoPairSet};
pub use trainer::{
    evaluate_mar, pretrain_supervised, EvalOutcome, train_selftrain, write_train_stats, PretrainOutcome, SelfTrainData, SelfTrainer, TrainStats,
};

/// Closed acceptance interval on CQA quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityRange {
    lower: f64,
    upper: f64,
}

impl QualityRange {
    pub const FULL: QualityRange = QualityRange { lower: 1.0, upper: 10.0 };

    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(1.0 <= lower && lower <= upper && upper <= 10.0) {
            return invalid(format!("quality range [{lower}, {upper}] must satisfy 1 <= lower <= upper <= 10"));
        }
        Ok(QualityRange { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn contains(&self, q: f64) -> bool {
        self.lower <= q && q <= self.upper
    }
}

impl std::fmt::Display for QualityRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.lower, self.upper)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_bounds_are_closed() {
        let r = QualityRange::new(7.0, 10.0).unwrap();
        assert!(r.contains(7.0) && r.contains(10.0) && r.contains(8.3));
        assert!(!r.contains(6.999) && !r.contains(f64::NAN));
        assert!(QualityRange::new(0.5, 4.0).is_err());
        assert!(QualityRange::new(5.0, 4.0).is_err());
        assert!(QualityRange::new(1.0, 10.5).is_err());
    }
}
