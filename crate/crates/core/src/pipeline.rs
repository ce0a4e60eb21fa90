//! Stage functions shared by the command-line driver and the experiment tests.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Ablation, ExperimentConfig};
use crate::cqa::{oracle_from_split, CqaTrainer};
use crate::data::{Datasets, Split};
use crate::error::{invalid, CoreError, Result};
use crate::nn::params::hex_digest;
use crate::models::{Checkpoint, CqaNet, MarNet, ModelKind};
use crate::selftrain::{pretrain_supervised, PretrainOutcome, SelfTrainData, SelfTrainer};

const CQA_INIT_STREAM: u64 = 0x5eed_c0a0;

fn ser(e: serde_json::Error) -> CoreError {
    CoreError::Serde(e.to_string())
}

/// One row of an ablation or quality-range comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub ablation: Ablation,
    pub quality_range: [f64; 2],
}

/// Reference, no-CQA, no-EMA and supervised-only rows.
pub fn ablation_variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let q = cfg.train.quality_range;
    let row = |name: &str, ablation: Ablation, quality_range| Variant { name: name.into(), ablation, quality_range };
    vec![
        row("reference", Ablation::default(), q),
        row("no-cqa", Ablation { no_cqa: true, ..Default::default() }, [1.0, 10.0]),
        row("no-ema", Ablation { no_ema: true, ..Default::default() }, q),
        row("supervised", Ablation { no_cli_loss: true, ..Default::default() }, q),
    ]
}

/// One row per configured quality range.
pub fn sweep_variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    cfg.sweep_ranges
        .iter()
        .map(|r| Variant { name: format!("q{}-{}", r[0], r[1]), ablation: Ablation::default(), quality_range: *r })
        .collect()
}

pub fn new_mar(cfg: &ExperimentConfig) -> Result<MarNet> {
    MarNet::new(cfg.mar_config(), cfg.seeds.model, DType::F32)
}

pub fn new_cqa(cfg: &ExperimentConfig) -> Result<CqaNet> {
    CqaNet::new(cfg.cqa, cfg.seeds.model ^ CQA_INIT_STREAM, DType::F32)
}

/// Supervised warm start on the simulated training split.
pub fn warm_start(cfg: &ExperimentConfig, sim_train: &Split) -> Result<PretrainOutcome> {
    let t = &cfg.train;
    pretrain_supervised(new_mar(cfg)?, sim_train, t.warm_epochs, t.batch_size, t.warm_lr(), cfg.cqa_train.dqaug.undertrained_epochs, cfg.seeds.train)
}

/// The under-trained MAR model used by DQAug. Identical to the warm-start snapshot
/// since both runs share seeds and data order.
pub fn under_trained_mar(cfg: &ExperimentConfig, sim_train: &Split) -> Result<MarNet> {
    let t = &cfg.train;
    let e = cfg.cqa_train.dqaug.undertrained_epochs;
    Ok(pretrain_supervised(new_mar(cfg)?, sim_train, e, t.batch_size, t.warm_lr(), e, cfg.seeds.train)?.under_trained)
}

pub fn new_cqa_trainer(cfg: &ExperimentConfig) -> Result<CqaTrainer> {
    CqaTrainer::new(new_cqa(cfg)?, cfg.cqa_train, cfg.seeds.train.wrapping_add(2))
}

/// Trains the CQA model on the annotated split.
pub fn train_cqa_model(cfg: &ExperimentConfig, split: &Split, under_trained: Option<&MarNet>) -> Result<CqaTrainer> {
    if split.is_empty() {
        return invalid("CQA dataset is empty");
    }
    let oracle = oracle_from_split(split)?;
    let mut trainer = new_cqa_trainer(cfg)?;
    for _ in 0..cfg.cqa_train.epochs {
        trainer.run_epoch(split, &oracle, under_trained)?;
    }
    Ok(trainer)
}

/// Hash of every setting the warm start depends on; equal keys mean a cached warm start is reusable.
pub fn warm_start_key(cfg: &ExperimentConfig) -> String {
    let t = &cfg.train;
    let key = serde_json::json!({
        "mar": cfg.mar_config(),
        "seeds": cfg.seeds,
        "data": cfg.dataset,
        "image_size": cfg.image_size,
        "simulated": cfg.simulated,
        "warm_epochs": t.warm_epochs,
        "batch_size": t.batch_size,
        "lr": t.warm_lr(),
    });
    let mut h = Sha256::new();
    h.update(key.to_string().as_bytes());
    hex_digest(h)
}

/// Reuses the warm start stored at `path` when its key matches, otherwise trains and stores it.
/// Returns the outcome and whether the cached checkpoint was reused.
pub fn load_or_warm_start(cfg: &ExperimentConfig, sim_train: &Split, path: &Path) -> Result<(PretrainOutcome, bool)> {
    let key = warm_start_key(cfg);
    if path.exists() {
        let ck = Checkpoint::load(path)?;
        if ck.meta.config_hash == key {
            let student = load_mar(path)?;
            let teacher = student.duplicate()?;
            let under_trained = student.duplicate()?;
            let epoch_losses = serde_json::from_value(ck.meta.stats.get("epoch_losses").cloned().unwrap_or_default()).unwrap_or_default();
            return Ok((PretrainOutcome { student, teacher, under_trained, epoch_losses }, true));
        }
    }
    let warm = warm_start(cfg, sim_train)?;
    let mut ck = mar_checkpoint(&warm.student, &key)?;
    ck.meta.epoch = cfg.train.warm_epochs;
    ck.meta.stats = serde_json::json!({ "epoch_losses": warm.epoch_losses });
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    ck.save(path)?;
    Ok((warm, false))
}

/// Self-trains one variant from a shared warm start.
pub fn run_variant(
    cfg: &ExperimentConfig,
    data: &Datasets,
    warm: &PretrainOutcome,
    cqa: Option<&CqaNet>,
    variant: &Variant,
) -> Result<SelfTrainer> {
    let mut tc = cfg.train;
    tc.ablation = variant.ablation;
    tc.quality_range = variant.quality_range;
    let cqa = match cqa {
        Some(c) => Some(c.duplicate()?),
        None if variant.ablation.no_cqa => None,
        None => return Err(CoreError::MissingPrerequisite(format!("variant {} needs a trained CQA model", variant.name))),
    };
    let split_data = SelfTrainData {
        sim_train: &data.sim_train,
        cli_train: &data.cli_train,
        cli_clean: &data.cli_clean,
        cli_test: Some(&data.cli_test),
    };
    let mut trainer = SelfTrainer::new(warm.student.duplicate()?, warm.teacher.duplicate()?, cqa, tc, cfg.seeds.train.wrapping_add(1))?;
    for _ in 0..tc.epochs {
        trainer.run_epoch(&split_data)?;
    }
    Ok(trainer)
}

pub fn mar_checkpoint(net: &MarNet, config_hash: &str) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(ModelKind::Mar, serde_json::to_value(net.config()).map_err(ser)?);
    ck.meta.config_hash = config_hash.to_string();
    ck.insert_store("model", net.store())?;
    Ok(ck)
}

pub fn load_mar(path: &Path) -> Result<MarNet> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.kind != ModelKind::Mar {
        return invalid(format!("{} is not a MAR checkpoint", path.display()));
    }
    let net = MarNet::new(serde_json::from_value(ck.meta.architecture.clone()).map_err(ser)?, 0, DType::F32)?;
    ck.load_store("model", net.store())
        .map_err(|e| CoreError::CorruptCheckpoint { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(net)
}

pub fn load_cqa(path: &Path) -> Result<CqaNet> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.kind != ModelKind::Cqa {
        return invalid(format!("{} is not a CQA checkpoint", path.display()));
    }
    let net = CqaNet::new(serde_json::from_value(ck.meta.architecture.clone()).map_err(ser)?, 0, DType::F32)?;
    ck.load_store("model", net.store())
        .map_err(|e| CoreError::CorruptCheckpoint { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(net)
}
