//! Clinical quality assessment: scoring, losses, augmentation, the synthetic
//! annotation oracle and the training loop.

pub mod bank;
pub mod dataset;
pub mod dqaug;
pub mod loss;
pub mod oracle;
pub mod train;

pub use bank::{MemoryBank, DEFAULT_BANK_CAPACITY};
pub use dataset::{holdout_partition, oracle_from_split, synthesize_cqa_split, Provenance};
pub use dqaug::{dqaug_mixup, dqaug_moderate, sample_mixup_lambda, DqaugCounters};
pub use loss::{
    ce_loss, ce_loss_tensor, cqa_loss, cqa_loss_tensor, prob2qua, prob2qua_tensor, scl_loss, scl_loss_tensor, ProbVector,
    QualityLabel, SclValue, DEFAULT_TAU, LAMBDA_SCL,
};
pub use oracle::{roi_mae, QualityOracle};
pub use train::{score_images, train_cqa, write_cqa_log, CqaEpochLog, CqaTrainer};
