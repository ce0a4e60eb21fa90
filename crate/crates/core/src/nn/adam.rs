use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning rate halved every `LR_HALVING_EPOCHS` completed epochs.
pub const LR_HALVING_EPOCHS: usize = 20;

pub fn halving_lr(base: f64, completed_epochs: usize) -> f64 {
    base * 0.5f64.powi((completed_epochs / LR_HALVING_EPOCHS) as i32)
}

/// Adam over a [`ParamStore`], with moment buffers exposed for checkpointing.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        let vars: Vec<(String, Var)> = store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        let m = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Adam { config, step: 0, vars, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Gradients keep the backward graph alive unless detached.
            let g = &g.detach();
            let m = ((&self.m[i] * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }

    /// Moment buffers as named tensors (`m.<param>`, `v.<param>`).
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.vars.len());
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.push((format!("m.{name}"), self.m[i].clone()));
            out.push((format!("v.{name}"), self.v[i].clone()));
        }
        out
    }

    pub fn load_state(&mut self, step: u64, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (slot, key) in [(0, format!("m.{name}")), (1, format!("v.{name}"))] {
                let Some(t) = lookup.get(key.as_str()) else {
                    return invalid(format!("optimizer state missing {key}"));
                };
                if t.dims() != var.dims() {
                    return invalid(format!("optimizer state shape mismatch for {key}"));
                }
                let t = t.to_dtype(var.dtype())?;
                if slot == 0 {
                    self.m[i] = t;
                } else {
                    self.v[i] = t;
                }
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = store.create("w", &[2], Init::Const(1.0), &mut rng).unwrap().as_tensor().clone();
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        let loss = (w.sqr().unwrap().sum_all().unwrap() * 3.0).unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        for v in store.flat_values().unwrap() {
            assert!((v - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = store.create("w", &[3], Init::Normal { std: 2.0 }, &mut rng).unwrap().as_tensor().clone();
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.05, beta1: 0.9, ..Default::default() }).unwrap();
        for _ in 0..600 {
            let loss = (w.clone() - 0.5).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        for v in store.flat_values().unwrap() {
            assert!((v - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn state_round_trip() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = store.create("w", &[2], Init::Const(1.0), &mut rng).unwrap().as_tensor().clone();
        let mut opt = Adam::new(&store, AdamConfig::default()).unwrap();
        let loss = w.sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let mut opt2 = Adam::new(&store, AdamConfig::default()).unwrap();
        opt2.load_state(opt.step_count(), &opt.state()).unwrap();
        assert_eq!(opt2.step_count(), 1);
        assert!(opt2.load_state(1, &[]).is_err());
    }
}
