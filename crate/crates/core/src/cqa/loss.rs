//! Quality scoring and the compound CQA loss.
//!
//! Each loss has a scalar reference form over plain slices and a batched tensor
//! form used for training; tests check one against the other.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::bank::MemoryBank;
use crate::error::{invalid, Result};
use crate::models::NUM_CLASSES;
use crate::nn::ops;

pub const LAMBDA_SCL: f64 = 0.01;
pub const DEFAULT_TAU: f64 = 0.5;
pub const CE_EPS: f64 = 1e-12;

/// Likert-style quality class in 1..=10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct QualityLabel(u8);

impl QualityLabel {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 10;

    pub fn new(k: u8) -> Result<Self> {
        if !(Self::MIN..=Self::MAX).contains(&k) {
            return invalid(format!("quality label {k} outside 1..=10"));
        }
        Ok(QualityLabel(k))
    }

    /// Rounds and clamps a real-valued quality to the nearest class.
    pub fn nearest(q: f64) -> Self {
        QualityLabel(q.round().clamp(Self::MIN as f64, Self::MAX as f64) as u8)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        (self.0 - 1) as usize
    }
}

impl TryFrom<u8> for QualityLabel {
    type Error = String;
    fn try_from(k: u8) -> std::result::Result<Self, String> {
        QualityLabel::new(k).map_err(|e| e.to_string())
    }
}

impl From<QualityLabel> for u8 {
    fn from(q: QualityLabel) -> u8 {
        q.0
    }
}

/// Validated 10-way probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector([f64; NUM_CLASSES]);

impl ProbVector {
    pub fn new(p: &[f64]) -> Result<Self> {
        if p.len() != NUM_CLASSES {
            return invalid(format!("probability vector has {} entries", p.len()));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("probability entries must be finite and nonnegative");
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return invalid(format!("probabilities sum to {s}"));
        }
        let mut a = [0.0; NUM_CLASSES];
        a.copy_from_slice(p);
        Ok(ProbVector(a))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Expected class index: sum of k * p[k] for k = 1..10.
pub fn prob2qua(p: &ProbVector) -> f64 {
    p.0.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum()
}

/// Batched prob2qua for an (N, 10) probability tensor, returned as (N,).
pub fn prob2qua_tensor(prob: &Tensor) -> Result<Tensor> {
    let k = class_values(prob.dtype())?;
    Ok(prob.broadcast_mul(&k)?.sum(D::Minus1)?)
}

fn class_values(dtype: DType) -> Result<Tensor> {
    let k: Vec<f64> = (1..=NUM_CLASSES).map(|k| k as f64).collect();
    Ok(Tensor::from_vec(k, (1, NUM_CLASSES), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Cross-entropy against a hard label, with the probability floored at 1e-12.
pub fn ce_loss(p: &ProbVector, label: QualityLabel) -> f64 {
    -p.0[label.index()].max(CE_EPS).ln()
}

/// Result of a contrastive-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SclValue {
    pub value: f64,
    /// False when the bank held no entry with the sample's label; the value is then 0.
    pub has_positives: bool,
}

/// Supervised contrastive loss of one latent against the memory bank.
pub fn scl_loss(latent: &[f64], label: QualityLabel, bank: &MemoryBank, tau: f64) -> Result<SclValue> {
    if tau <= 0.0 {
        return invalid("temperature must be positive");
    }
    let logits: Vec<f64> = bank
        .iter()
        .map(|(z, _)| {
            if z.len() != latent.len() {
                return invalid("bank latent dimension differs from query");
            }
            Ok(z.iter().zip(latent).map(|(a, b)| *a as f64 * b).sum::<f64>() / tau)
        })
        .collect::<Result<_>>()?;
    let positives: Vec<usize> = bank.iter().enumerate().filter(|(_, (_, l))| *l == label).map(|(i, _)| i).collect();
    if positives.is_empty() {
        return Ok(SclValue { value: 0.0, has_positives: false });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let value = -positives.iter().map(|&j| logits[j] - lse).sum::<f64>() / positives.len() as f64;
    Ok(SclValue { value, has_positives: true })
}

/// CE plus 0.01 times the contrastive term.
pub fn cqa_loss(p: &ProbVector, latent: &[f64], label: QualityLabel, bank: &MemoryBank, tau: f64) -> Result<f64> {
    Ok(ce_loss(p, label) + LAMBDA_SCL * scl_loss(latent, label, bank, tau)?.value)
}

fn one_hot(labels: &[QualityLabel], dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f64; labels.len() * NUM_CLASSES];
    for (i, l) in labels.iter().enumerate() {
        v[i * NUM_CLASSES + l.index()] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), NUM_CLASSES), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean cross-entropy of (N, 10) logits against hard labels.
pub fn ce_loss_tensor(logits: &Tensor, labels: &[QualityLabel]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if n != labels.len() || k != NUM_CLASSES {
        return invalid(format!("logits {n}x{k} vs {} labels", labels.len()));
    }
    let lp = ops::log_softmax_last(logits)?;
    Ok((lp * one_hot(labels, logits.dtype())?)?.sum_all()?.neg()?.affine(1.0 / n as f64, 0.0)?)
}

/// Per-sample contrastive losses for an (N, D) latent batch; samples without positives give 0.
pub fn scl_loss_tensor(latent: &Tensor, labels: &[QualityLabel], bank: &MemoryBank, tau: f64) -> Result<Tensor> {
    let (n, d) = latent.dims2()?;
    if n != labels.len() {
        return invalid("latent batch and labels differ in length");
    }
    if bank.is_empty() {
        return Ok(Tensor::zeros(n, latent.dtype(), &Device::Cpu)?);
    }
    let z = bank.latent_matrix(d, latent.dtype())?;
    let logits = (latent.matmul(&z.t()?)? / tau)?;
    let lp = ops::log_softmax_last(&logits)?;
    let mut mask = vec![0f64; n * bank.len()];
    let mut inv_count = vec![0f64; n];
    for (i, l) in labels.iter().enumerate() {
        let mut c = 0usize;
        for (j, (_, bl)) in bank.iter().enumerate() {
            if bl == *l {
                mask[i * bank.len() + j] = 1.0;
                c += 1;
            }
        }
        inv_count[i] = if c > 0 { 1.0 / c as f64 } else { 0.0 };
    }
    let mask = Tensor::from_vec(mask, (n, bank.len()), &Device::Cpu)?.to_dtype(latent.dtype())?;
    let inv = Tensor::from_vec(inv_count, n, &Device::Cpu)?.to_dtype(latent.dtype())?;
    Ok((lp * mask)?.sum(D::Minus1)?.neg()?.mul(&inv)?)
}

/// Batch-mean compound loss, returned with its CE and contrastive parts.
pub struct CqaLossParts {
    pub total: Tensor,
    pub ce: Tensor,
    pub scl: Tensor,
}

pub fn cqa_loss_tensor(
    logits: &Tensor,
    latent: &Tensor,
    labels: &[QualityLabel],
    bank: &MemoryBank,
    tau: f64,
) -> Result<CqaLossParts> {
    let ce = ce_loss_tensor(logits, labels)?;
    let scl = scl_loss_tensor(latent, labels, bank, tau)?.mean_all()?;
    let total = (&ce + (&scl * LAMBDA_SCL)?)?;
    Ok(CqaLossParts { total, ce, scl })
}
