use std::io::Write;
use std::path::Path;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::ema::ema_update;
use super::loss::{assess_pseudo, build_pseudo_pairs, cli_loss, sim_loss, total_loss};
use super::QualityRange;
use crate::config::TrainConfig;
use crate::cqa::score_images;
use crate::data::{view_f64, view_mask, Split};
use crate::error::{invalid, io_err, CoreError, Result};
use crate::metrics::{mae, psnr, ssim, MetricReport, SampleMetrics};
use crate::models::{Checkpoint, CqaNet, MarNet, ModelKind};
use crate::nn::{halving_lr, ops, Adam, AdamConfig};

fn adam_for(net: &MarNet, lr: f64) -> Result<Adam> {
    Adam::new(net.store(), AdamConfig { lr, ..Default::default() })
}

/// Result of the supervised warm start.
pub struct PretrainOutcome {
    pub student: MarNet,
    pub teacher: MarNet,
    /// Copy taken after `snapshot_epoch` epochs, used for moderate-quality augmentation.
    pub under_trained: MarNet,
    pub epoch_losses: Vec<f64>,
}

/// Trains `student` on paired simulated data with the masked l1 loss.
pub fn pretrain_supervised(
    student: MarNet,
    sim: &Split,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    snapshot_epoch: usize,
    seed: u64,
) -> Result<PretrainOutcome> {
    if sim.is_empty() {
        return invalid("simulated training split is empty");
    }
    if batch_size == 0 {
        return invalid("batch size must be positive");
    }
    let mut opt = adam_for(&student, lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let with_li = student.config().input_mode.needs_li();
    let mut under_trained = None;
    let mut epoch_losses = Vec::with_capacity(epochs);
    if snapshot_epoch == 0 {
        under_trained = Some(student.duplicate()?);
    }
    for epoch in 1..=epochs {
        opt.set_lr(halving_lr(lr, epoch - 1));
        let mut order: Vec<usize> = (0..sim.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(batch_size) {
            let batch = Batch::from_split(sim, chunk, student.dtype(), with_li, true)?;
            let loss = sim_loss(&student, &batch)?;
            opt.step(&loss.backward()?)?;
            sum += ops::scalar(&loss)?;
            n += 1;
        }
        epoch_losses.push(sum / n as f64);
        log::info!("warm start epoch {epoch}: sim loss {:.5}", sum / n as f64);
        if epoch == snapshot_epoch {
            under_trained = Some(student.duplicate()?);
        }
    }
    let under_trained = match under_trained {
        Some(m) => m,
        None => student.duplicate()?,
    };
    let teacher = student.duplicate()?;
    Ok(PretrainOutcome { student, teacher, under_trained, epoch_losses })
}

/// Input and output metrics of a MAR network on a paired split.
#[derive(Debug, Clone, Default)]
pub struct EvalOutcome {
    pub input: MetricReport,
    pub output: MetricReport,
}

/// Runs `net` over a paired split; outputs are clipped to [0, 1] before scoring.
pub fn evaluate_mar(net: &MarNet, split: &Split, cqa: Option<&CqaNet>, batch_size: usize) -> Result<EvalOutcome> {
    let side = split.side();
    let domain = split.manifest.domain_tag.as_str().to_string();
    let with_li = net.config().input_mode.needs_li();
    let mut out = EvalOutcome::default();
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = Batch::from_split(split, chunk, net.dtype(), with_li, false)?;
        let pred = net.forward(&batch.x, batch.li.as_ref())?.clamp(0.0, 1.0)?;
        let images = ops::unstack_images(&pred.to_dtype(DType::F32)?)?;
        let inputs: Vec<&[f32]> = chunk.iter().map(|&i| split.samples[i].artifact.as_deref().unwrap_or_default()).collect();
        let (q_in, q_out) = match cqa {
            Some(c) => {
                let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
                (Some(score_images(c, &inputs, batch_size)?), Some(score_images(c, &refs, batch_size)?))
            }
            None => (None, None),
        };
        for (k, &i) in chunk.iter().enumerate() {
            let s = &split.samples[i];
            let gt = view_f64(s.require(&s.clean, "clean")?, side);
            let metal = view_mask(s.metal_mask()?, side);
            let score = |img: &[f32], q: Option<f64>| -> Result<SampleMetrics> {
                let p = view_f64(img, side);
                Ok(SampleMetrics {
                    sample_id: s.id.clone(),
                    domain: domain.clone(),
                    psnr: psnr(p.view(), gt.view(), metal)?,
                    ssim: ssim(p.view(), gt.view(), metal)?,
                    mae: mae(p.view(), gt.view(), metal)?,
                    cqa_quality: q,
                })
            };
            out.input.samples.push(score(inputs[k], q_in.as_ref().map(|v| v[k]))?);
            out.output.samples.push(score(&images[k], q_out.as_ref().map(|v| v[k]))?);
        }
    }
    Ok(out)
}

/// Per-epoch record of a self-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub epoch: usize,
    pub accepted_count: usize,
    pub assessed_count: usize,
    /// Mean CQA quality of all pseudo ground-truths (None without a CQA model).
    pub mean_pseudo_quality: Option<f64>,
    pub sim_loss: f64,
    pub cli_loss: f64,
    pub eval_psnr_in: Option<f64>,
    pub eval_psnr_out: Option<f64>,
    pub eval_ssim_out: Option<f64>,
    pub eval_cqa_out: Option<f64>,
    /// Pseudo pairs with nonzero clinical loss, and how many of them had q outside the range.
    pub gate_checked: usize,
    pub gate_violations: usize,
}

/// Splits used by self-training.
#[derive(Clone, Copy)]
pub struct SelfTrainData<'a> {
    pub sim_train: &'a Split,
    pub cli_train: &'a Split,
    /// Artifact-free clinical images sampled as Y'.
    pub cli_clean: &'a Split,
    /// Paired clinical test split evaluated after epochs.
    pub cli_test: Option<&'a Split>,
}

/// Student, EMA teacher and frozen CQA, with the optimizer and RNG state.
pub struct SelfTrainer {
    pub student: MarNet,
    pub teacher: MarNet,
    cqa: Option<CqaNet>,
    pub config: TrainConfig,
    opt: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    pub stats: Vec<TrainStats>,
}

impl SelfTrainer {
    pub fn new(student: MarNet, teacher: MarNet, cqa: Option<CqaNet>, config: TrainConfig, seed: u64) -> Result<Self> {
        if cqa.is_none() && !config.ablation.no_cqa {
            return invalid("a CQA model is required unless the no_cqa ablation is set");
        }
        if student.config() != teacher.config() {
            return invalid("teacher and student architectures differ");
        }
        QualityRange::new(config.quality_range[0], config.quality_range[1])?;
        let opt = adam_for(&student, config.lr)?;
        Ok(SelfTrainer { student, teacher, cqa, config, opt, rng: ChaCha8Rng::seed_from_u64(seed), epoch: 0, stats: Vec::new() })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn cqa(&self) -> Option<&CqaNet> {
        self.cqa.as_ref()
    }

    /// The gate in force: the configured range, or none under the no_cqa ablation.
    pub fn gate(&self) -> Option<QualityRange> {
        if self.config.ablation.no_cqa {
            None
        } else {
            Some(QualityRange::new(self.config.quality_range[0], self.config.quality_range[1]).expect("validated"))
        }
    }

    pub fn run_epoch(&mut self, data: &SelfTrainData<'_>) -> Result<TrainStats> {
        let ablation = self.config.ablation;
        if data.sim_train.is_empty() {
            return invalid("simulated training split is empty");
        }
        if !ablation.no_cli_loss && (data.cli_train.is_empty() || data.cli_clean.is_empty()) {
            return invalid("clinical training splits are empty");
        }
        let bs = self.config.batch_size;
        let with_li = self.student.config().input_mode.needs_li();
        let dtype = self.student.dtype();
        let side = data.sim_train.side();
        let gate = self.gate();
        self.opt.set_lr(halving_lr(self.config.lr, self.epoch));

        let mut cli_order: Vec<usize> = (0..data.cli_train.len()).collect();
        cli_order.shuffle(&mut self.rng);
        let steps = cli_order.len().div_ceil(bs).max(1);
        let mut sim_order: Vec<usize> = Vec::new();
        let mut sim_pos = 0;

        let mut st = TrainStats {
            epoch: self.epoch + 1,
            accepted_count: 0,
            assessed_count: 0,
            mean_pseudo_quality: None,
            sim_loss: 0.0,
            cli_loss: 0.0,
            eval_psnr_in: None,
            eval_psnr_out: None,
            eval_ssim_out: None,
            eval_cqa_out: None,
            gate_checked: 0,
            gate_violations: 0,
        };
        let mut q_sum = 0.0;
        for step in 0..steps {
            let mut sim_idx = Vec::with_capacity(bs);
            while sim_idx.len() < bs.min(data.sim_train.len()) {
                if sim_pos == sim_order.len() {
                    sim_order = (0..data.sim_train.len()).collect();
                    sim_order.shuffle(&mut self.rng);
                    sim_pos = 0;
                }
                sim_idx.push(sim_order[sim_pos]);
                sim_pos += 1;
            }
            let sim_batch = Batch::from_split(data.sim_train, &sim_idx, dtype, with_li, true)?;
            let l_sim = sim_loss(&self.student, &sim_batch)?;

            let l_cli = if ablation.no_cli_loss {
                None
            } else {
                let idx = &cli_order[(step * bs).min(cli_order.len())..((step + 1) * bs).min(cli_order.len())];
                let cli_batch = Batch::from_split(data.cli_train, idx, dtype, with_li, false)?;
                let (y_tilde, q) = assess_pseudo(&self.teacher, self.cqa.as_ref(), &cli_batch)?;
                let primes: Vec<&[f32]> = (0..idx.len())
                    .map(|_| {
                        let s = &data.cli_clean.samples[self.rng.random_range(0..data.cli_clean.len())];
                        s.require(&s.clean, "clean").map(|v| v.as_slice())
                    })
                    .collect::<Result<_>>()?;
                let y_prime = ops::stack_images(&primes, side, dtype)?;
                let pairs = build_pseudo_pairs(&cli_batch, &y_tilde, &y_prime, &q, gate)?;
                let loss = cli_loss(&self.student, &pairs)?;
                for (i, &c) in loss.per_sample.iter().enumerate() {
                    if c != 0.0 {
                        st.gate_checked += 1;
                        if !pairs.accepted[i] || gate.is_some_and(|g| !g.contains(q[i])) {
                            st.gate_violations += 1;
                        }
                    }
                }
                st.accepted_count += pairs.accepted_count();
                st.assessed_count += q.len();
                q_sum += q.iter().sum::<f64>();
                Some(loss.total)
            };
            let loss = total_loss(&l_sim, l_cli.as_ref())?;
            self.opt.step(&loss.backward()?)?;
            st.sim_loss += ops::scalar(&l_sim)?;
            if let Some(c) = &l_cli {
                st.cli_loss += ops::scalar(c)?;
            }
            if !ablation.no_ema {
                ema_update(self.teacher.store(), self.student.store(), self.config.ema_decay)?;
            }
        }
        st.sim_loss /= steps as f64;
        st.cli_loss /= steps as f64;
        if st.assessed_count > 0 && self.cqa.is_some() {
            st.mean_pseudo_quality = Some(q_sum / st.assessed_count as f64);
        }
        self.epoch += 1;

        let every = self.config.eval_every;
        let due = if every == 0 { self.epoch == self.config.epochs } else { self.epoch % every == 0 || self.epoch == self.config.epochs };
        if let (true, Some(test)) = (due, data.cli_test) {
            let ev = evaluate_mar(&self.student, test, self.cqa.as_ref(), bs.max(8))?;
            let (a_in, a_out) = (ev.input.aggregate(None), ev.output.aggregate(None));
            st.eval_psnr_in = a_in.map(|a| a.psnr);
            st.eval_psnr_out = a_out.map(|a| a.psnr);
            st.eval_ssim_out = a_out.map(|a| a.ssim);
            st.eval_cqa_out = a_out.and_then(|a| a.cqa_quality);
        }
        log::info!(
            "self-train epoch {}: accepted {}/{} q {:?} sim {:.5} cli {:.5} psnr {:?} -> {:?}",
            st.epoch,
            st.accepted_count,
            st.assessed_count,
            st.mean_pseudo_quality,
            st.sim_loss,
            st.cli_loss,
            st.eval_psnr_in,
            st.eval_psnr_out
        );
        self.stats.push(st.clone());
        Ok(st)
    }

    pub fn checkpoint(&self, config_hash: &str) -> Result<Checkpoint> {
        let ser = |e: serde_json::Error| CoreError::Serde(e.to_string());
        let mut ck = Checkpoint::new(ModelKind::Mar, serde_json::to_value(self.student.config()).map_err(ser)?);
        ck.meta.epoch = self.epoch;
        ck.meta.config_hash = config_hash.to_string();
        ck.meta.rng_state = Some(serde_json::to_value(&self.rng).map_err(ser)?);
        ck.meta.stats = serde_json::json!({ "train": self.stats, "config": self.config });
        ck.insert_store("model", self.student.store())?;
        ck.insert_store("teacher", self.teacher.store())?;
        ck.insert_optimizer(&self.opt);
        Ok(ck)
    }

    /// Restores a run from a checkpoint written by [`SelfTrainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, cqa: Option<CqaNet>, config: TrainConfig) -> Result<Self> {
        let ser = |e: serde_json::Error| CoreError::Serde(e.to_string());
        if ck.meta.kind != ModelKind::Mar || !ck.has_group("teacher") {
            return invalid("checkpoint does not hold a self-training state");
        }
        let arch = serde_json::from_value(ck.meta.architecture.clone()).map_err(ser)?;
        let student = MarNet::new(arch, 0, DType::F32)?;
        ck.load_store("model", student.store())?;
        let teacher = student.duplicate()?;
        ck.load_store("teacher", teacher.store())?;
        let mut t = SelfTrainer::new(student, teacher, cqa, config, 0)?;
        ck.load_optimizer(&mut t.opt)?;
        t.epoch = ck.meta.epoch;
        if let Some(state) = &ck.meta.rng_state {
            t.rng = serde_json::from_value(state.clone()).map_err(ser)?;
        }
        if let Some(s) = ck.meta.stats.get("train") {
            t.stats = serde_json::from_value(s.clone()).map_err(ser)?;
        }
        Ok(t)
    }
}

/// Runs `config.epochs` self-training epochs from a warm-started student and teacher.
pub fn train_selftrain(
    config: TrainConfig,
    data: &SelfTrainData<'_>,
    student: MarNet,
    teacher: MarNet,
    cqa: Option<CqaNet>,
    seed: u64,
) -> Result<SelfTrainer> {
    let mut trainer = SelfTrainer::new(student, teacher, cqa, config, seed)?;
    for _ in 0..config.epochs {
        trainer.run_epoch(data)?;
    }
    Ok(trainer)
}

fn opt_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into())
}

/// CSV of per-epoch statistics.
pub fn write_train_stats(path: &Path, rows: &[TrainStats], config_hash: &str) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# config_hash: {config_hash}").expect("vec write");
    writeln!(buf, "epoch,accepted_count,mean_pseudo_quality,sim_loss,cli_loss,eval_psnr_in,eval_psnr_out,eval_ssim_out,eval_cqa_out")
        .expect("vec write");
    for r in rows {
        writeln!(
            buf,
            "{},{},{},{:.6},{:.6},{},{},{},{}",
            r.epoch,
            r.accepted_count,
            opt_value(r.mean_pseudo_quality),
            r.sim_loss,
            r.cli_loss,
            opt_value(r.eval_psnr_in),
            opt_value(r.eval_psnr_out),
            opt_value(r.eval_ssim_out),
            opt_value(r.eval_cqa_out)
        )
        .expect("vec write");
    }
    std::fs::write(path, buf).map_err(io_err(path))
}
