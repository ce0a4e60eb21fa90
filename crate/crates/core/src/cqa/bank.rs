use std::collections::VecDeque;

use candle_core::{DType, Device, Tensor};

use super::loss::QualityLabel;
use crate::error::{invalid, Result};

pub const DEFAULT_BANK_CAPACITY: usize = 300;

/// FIFO queue of detached (latent, label) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<(Vec<f64>, QualityLabel)>,
}

impl Default for MemoryBank {
    fn default() -> Self {
        MemoryBank::new(DEFAULT_BANK_CAPACITY)
    }
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank { capacity, entries: VecDeque::with_capacity(capacity + 1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a copy; evicts the oldest entry once capacity is exceeded.
    pub fn push(&mut self, latent: &[f64], label: QualityLabel) -> Result<()> {
        let norm = latent.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return invalid(format!("bank latent must be unit norm, got {norm}"));
        }
        if let Some((first, _)) = self.entries.front() {
            if first.len() != latent.len() {
                return invalid("bank latent dimension changed");
            }
        }
        self.entries.push_back((latent.to_vec(), label));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Pushes every row of an (N, D) latent tensor, detached.
    pub fn push_batch(&mut self, latent: &Tensor, labels: &[QualityLabel]) -> Result<()> {
        let rows = latent.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        if rows.len() != labels.len() {
            return invalid("latent rows and labels differ in length");
        }
        for (row, l) in rows.iter().zip(labels) {
            self.push(row, *l)?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], QualityLabel)> {
        self.entries.iter().map(|(z, l)| (z.as_slice(), *l))
    }

    /// Entries stacked as an (M, D) constant tensor.
    pub fn latent_matrix(&self, dim: usize, dtype: DType) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(self.len() * dim);
        for (z, _) in &self.entries {
            if z.len() != dim {
                return invalid("bank latent dimension differs from query");
            }
            flat.extend_from_slice(z);
        }
        Ok(Tensor::from_vec(flat, (self.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn labels(&self) -> Vec<QualityLabel> {
        self.entries.iter().map(|(_, l)| *l).collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(i: usize) -> Vec<f64> {
        let a = i as f64 * 0.01;
        vec![a.cos(), a.sin()]
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = MemoryBank::new(300);
        for i in 0..301 {
            bank.push(&unit(i), QualityLabel::new((i % 10 + 1) as u8).unwrap()).unwrap();
        }
        assert_eq!(bank.len(), 300);
        let first: Vec<f64> = bank.iter().next().unwrap().0.to_vec();
        assert_eq!(first, unit(1));
        assert!(bank.iter().all(|(z, _)| z != unit(0).as_slice()));
    }

    #[test]
    fn order_preserved() {
        let mut bank = MemoryBank::new(300);
        for i in 0..5 {
            bank.push(&unit(i), QualityLabel::new(1).unwrap()).unwrap();
        }
        let got: Vec<Vec<f64>> = bank.iter().map(|(z, _)| z.to_vec()).collect();
        assert_eq!(got, (0..5).map(unit).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_non_unit_latents() {
        let mut bank = MemoryBank::new(3);
        assert!(bank.push(&[2.0, 0.0], QualityLabel::new(1).unwrap()).is_err());
    }
}
