use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bank::MemoryBank;
use super::dataset::holdout_partition;
use super::dqaug::{dqaug_mixup, dqaug_moderate, plan, sample_mixup_lambda, DqaugCounters};
use super::loss::{cqa_loss_tensor, prob2qua_tensor, QualityLabel};
use super::oracle::QualityOracle;
use crate::config::CqaTrainConfig;
use crate::data::{Image, Split};
use crate::error::{invalid, io_err, CoreError, Result};
use crate::metrics::{plcc, srcc};
use crate::models::{Checkpoint, CqaNet, MarNet, ModelKind};
use crate::nn::{halving_lr, ops, Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqaEpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub scl: f64,
    pub loss: f64,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub moderate: usize,
    pub mixup: usize,
}

/// Quality scores (prob2qua) for a list of images, evaluated in batches.
pub fn score_images(net: &CqaNet, images: &[&[f32]], batch: usize) -> Result<Vec<f64>> {
    let side = net.config().image_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = ops::stack_images(chunk, side, net.dtype())?;
        let q = prob2qua_tensor(&net.forward(&x)?.prob)?;
        out.extend(q.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

/// Owns the CQA network, optimizer, memory bank and RNG across epochs.
pub struct CqaTrainer {
    pub net: CqaNet,
    pub config: CqaTrainConfig,
    opt: Adam,
    bank: MemoryBank,
    rng: ChaCha8Rng,
    epoch: usize,
    pub log: Vec<CqaEpochLog>,
    pub counters: DqaugCounters,
}

impl CqaTrainer {
    pub fn new(net: CqaNet, config: CqaTrainConfig, seed: u64) -> Result<Self> {
        let opt = Adam::new(net.store(), AdamConfig { lr: config.lr, ..Default::default() })?;
        Ok(CqaTrainer {
            net,
            config,
            opt,
            bank: MemoryBank::new(config.bank_capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
            log: Vec::new(),
            counters: DqaugCounters::default(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    /// One pass over the non-held-out samples followed by held-out SRCC/PLCC.
    pub fn run_epoch(&mut self, split: &Split, oracle: &QualityOracle, undertrained: Option<&MarNet>) -> Result<CqaEpochLog> {
        let (mut train_idx, test_idx) = holdout_partition(split);
        if train_idx.is_empty() {
            return invalid("CQA training split is empty");
        }
        let aug = self.config.dqaug;
        if aug.enabled && aug.moderate_prob > 0.0 && undertrained.is_none() {
            return Err(CoreError::MissingPrerequisite("DQAug needs an under-trained MAR checkpoint".into()));
        }
        let side = split.side();
        self.opt.set_lr(halving_lr(self.config.lr, self.epoch));
        train_idx.shuffle(&mut self.rng);
        let start = self.counters;
        let (mut ce_sum, mut scl_sum, mut loss_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in train_idx.chunks(self.config.batch_size) {
            let mut images: Vec<Image> = Vec::with_capacity(chunk.len());
            let mut labels: Vec<QualityLabel> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &split.samples[i];
                images.push(s.require(&s.assessed, "assessed")?.clone());
                labels.push(s.label.ok_or_else(|| CoreError::MissingPrerequisite(format!("{} has no label", s.id)))?);
            }
            if aug.enabled {
                let (moderate, mixup) = plan(&mut self.rng, chunk.len(), aug.moderate_prob, aug.mixup_prob);
                let picks: Vec<usize> = (0..chunk.len())
                    .filter(|&k| moderate[k] && split.samples[chunk[k]].artifact.is_some() && split.samples[chunk[k]].clean.is_some())
                    .collect();
                if let (Some(mar), false) = (undertrained, picks.is_empty()) {
                    let srcs: Vec<_> = picks.iter().map(|&k| &split.samples[chunk[k]]).collect();
                    for (&k, (img, l)) in picks.iter().zip(dqaug_moderate(&srcs, mar, oracle, side)?) {
                        images[k] = img;
                        labels[k] = l;
                    }
                    self.counters.moderate += picks.len();
                }
                if chunk.len() > 1 {
                    let snapshot: Vec<(Image, QualityLabel)> = images.iter().cloned().zip(labels.iter().copied()).collect();
                    for k in (0..chunk.len()).filter(|&k| mixup[k]) {
                        let partner = (k + 1) % chunk.len();
                        let lambda = sample_mixup_lambda(&mut self.rng, aug.mixup_alpha)?;
                        let (img, l) = dqaug_mixup(
                            (&snapshot[k].0, snapshot[k].1),
                            (&snapshot[partner].0, snapshot[partner].1),
                            lambda,
                        )?;
                        images[k] = img;
                        labels[k] = l;
                        self.counters.mixup += 1;
                    }
                }
            }
            let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
            let x = ops::stack_images(&refs, side, self.net.dtype())?;
            let out = self.net.forward(&x)?;
            let parts = cqa_loss_tensor(&out.logits, &out.latent, &labels, &self.bank, self.config.tau)?;
            let grads = parts.total.backward()?;
            self.opt.step(&grads)?;
            self.bank.push_batch(&out.latent, &labels)?;
            ce_sum += ops::scalar(&parts.ce)?;
            scl_sum += ops::scalar(&parts.scl)?;
            loss_sum += ops::scalar(&parts.total)?;
            batches += 1;
        }
        self.epoch += 1;
        let (srcc_v, plcc_v) = if test_idx.len() >= 2 { self.evaluate(split, &test_idx)? } else { (None, None) };
        let b = batches as f64;
        let row = CqaEpochLog {
            epoch: self.epoch,
            ce: ce_sum / b,
            scl: scl_sum / b,
            loss: loss_sum / b,
            srcc: srcc_v,
            plcc: plcc_v,
            moderate: self.counters.moderate - start.moderate,
            mixup: self.counters.mixup - start.mixup,
        };
        log::info!(
            "cqa epoch {}: loss {:.4} ce {:.4} scl {:.4} srcc {:?} plcc {:?}",
            row.epoch,
            row.loss,
            row.ce,
            row.scl,
            row.srcc,
            row.plcc
        );
        self.log.push(row.clone());
        Ok(row)
    }

    /// SRCC and PLCC of predicted quality against stored labels on the given samples.
    pub fn evaluate(&self, split: &Split, idx: &[usize]) -> Result<(Option<f64>, Option<f64>)> {
        let images: Vec<&[f32]> =
            idx.iter().map(|&i| split.samples[i].require(&split.samples[i].assessed, "assessed").map(|v| v.as_slice())).collect::<Result<_>>()?;
        let truth: Vec<f64> = idx.iter().map(|&i| split.samples[i].label.map(|l| l.get() as f64).unwrap_or(f64::NAN)).collect();
        let pred = score_images(&self.net, &images, 32)?;
        Ok((srcc(&pred, &truth)?, plcc(&pred, &truth)?))
    }

    pub fn checkpoint(&self, config_hash: &str) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(ModelKind::Cqa, serde_json::to_value(self.net.config()).map_err(|e| CoreError::Serde(e.to_string()))?);
        ck.meta.epoch = self.epoch;
        ck.meta.config_hash = config_hash.to_string();
        ck.meta.rng_state = Some(serde_json::to_value(&self.rng).map_err(|e| CoreError::Serde(e.to_string()))?);
        ck.meta.stats = serde_json::json!({ "log": self.log, "counters": self.counters });
        ck.insert_store("model", self.net.store())?;
        ck.insert_optimizer(&self.opt);
        if !self.bank.is_empty() {
            let dim = self.net.config().latent_dim();
            let labels: Vec<f32> = self.bank.labels().iter().map(|l| l.get() as f32).collect();
            let n = labels.len();
            ck.insert_group(
                "bank",
                vec![
                    ("latents".into(), self.bank.latent_matrix(dim, DType::F64)?),
                    ("labels".into(), Tensor::from_vec(labels, n, &Device::Cpu)?),
                ],
            );
        }
        Ok(ck)
    }

    /// Restores a trainer so that the next epoch matches an uninterrupted run.
    pub fn from_checkpoint(ck: &Checkpoint, config: CqaTrainConfig) -> Result<Self> {
        if ck.meta.kind != ModelKind::Cqa {
            return invalid("checkpoint does not hold a CQA model");
        }
        let arch = serde_json::from_value(ck.meta.architecture.clone()).map_err(|e| CoreError::Serde(e.to_string()))?;
        let net = CqaNet::new(arch, 0, DType::F32)?;
        ck.load_store("model", net.store())?;
        let mut t = CqaTrainer::new(net, config, 0)?;
        ck.load_optimizer(&mut t.opt)?;
        t.epoch = ck.meta.epoch;
        if let Some(state) = &ck.meta.rng_state {
            t.rng = serde_json::from_value(state.clone()).map_err(|e| CoreError::Serde(e.to_string()))?;
        }
        if let Some(log) = ck.meta.stats.get("log") {
            t.log = serde_json::from_value(log.clone()).map_err(|e| CoreError::Serde(e.to_string()))?;
        }
        if let Some(c) = ck.meta.stats.get("counters") {
            t.counters = serde_json::from_value(c.clone()).map_err(|e| CoreError::Serde(e.to_string()))?;
        }
        let bank = ck.group("bank");
        if !bank.is_empty() {
            let get = |k: &str| bank.iter().find(|(n, _)| n == k).map(|(_, t)| t.clone());
            let (Some(lat), Some(lab)) = (get("latents"), get("labels")) else {
                return invalid("checkpoint bank is incomplete");
            };
            let lat = lat.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            let lab = lab.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for (z, l) in lat.iter().zip(lab) {
                t.bank.push(z, QualityLabel::new(l as u8)?)?;
            }
        }
        Ok(t)
    }
}

/// Trains for `config.epochs` epochs and returns the trainer (network plus log).
pub fn train_cqa(
    net: CqaNet,
    split: &Split,
    config: CqaTrainConfig,
    oracle: &QualityOracle,
    undertrained: Option<&MarNet>,
    seed: u64,
) -> Result<CqaTrainer> {
    if split.is_empty() {
        return invalid("CQA dataset is empty");
    }
    let mut trainer = CqaTrainer::new(net, config, seed)?;
    for _ in 0..config.epochs {
        trainer.run_epoch(split, oracle, undertrained)?;
    }
    Ok(trainer)
}

fn opt_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into())
}

/// CSV with columns epoch, ce, scl, srcc, plcc.
pub fn write_cqa_log(path: &Path, rows: &[CqaEpochLog], config_hash: &str) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# config_hash: {config_hash}").expect("vec write");
    writeln!(buf, "epoch,ce,scl,srcc,plcc").expect("vec write");
    for r in rows {
        writeln!(buf, "{},{:.6},{:.6},{},{}", r.epoch, r.ce, r.scl, opt_value(r.srcc), opt_value(r.plcc)).expect("vec write");
    }
    std::fs::write(path, buf).map_err(io_err(path))
}
