use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

/// Initialisation rule for a new parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    /// He-uniform bound sqrt(6 / fan_in) scaled by `gain`.
    HeUniform { fan_in: usize, gain: f64 },
}

impl Init {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::HeUniform { fan_in, gain } => {
                let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        }
    }
}

/// Ordered, named collection of trainable variables.
#[derive(Clone)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
    index: HashMap<String, usize>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.entries.len())
            .field("elements", &self.num_elements())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new(), dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Var> {
        if self.index.contains_key(name) {
            return invalid(format!("duplicate parameter name {name}"));
        }
        let n: usize = shape.iter().product();
        let data = init.sample(n, rng);
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Detached copies of every parameter, in registration order.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites parameter values by name. Every stored name must be present.
    pub fn load(&self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, var) in &self.entries {
            let Some(t) = lookup.get(name.as_str()) else {
                return invalid(format!("missing parameter {name}"));
            };
            if t.dims() != var.dims() {
                return invalid(format!("shape mismatch for {name}: {:?} vs {:?}", t.dims(), var.dims()));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies all values from a store with identical structure.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.load(&other.snapshot()?)
    }

    /// All parameter values flattened into one f64 vector.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_elements());
        for (_, v) in &self.entries {
            out.extend(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    /// SHA-256 over names and little-endian f64 values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in &self.entries {
            h.update(name.as_bytes());
            for x in v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex_digest(h))
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Scoped helper that prefixes parameter names while building a network.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.param_var(name, shape, init)?.as_tensor().clone())
    }

    pub fn param_var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.create(&full, shape, init, self.rng)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut s = ParamStore::new(DType::F32);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            s.create("a", &[4, 3], Init::HeUniform { fan_in: 3, gain: 1.0 }, &mut rng).unwrap();
            s.create("b", &[2], Init::Normal { std: 0.1 }, &mut rng).unwrap();
            s
        };
        assert_eq!(build().fingerprint().unwrap(), build().fingerprint().unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        s.create("w", &[1], Init::Zeros, &mut rng).unwrap();
        assert!(s.create("w", &[1], Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn copy_and_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::new(DType::F64);
        let mut b = ParamStore::new(DType::F64);
        a.create("x.w", &[3, 2], Init::Normal { std: 1.0 }, &mut rng).unwrap();
        b.create("x.w", &[3, 2], Init::Zeros, &mut rng).unwrap();
        b.copy_from(&a).unwrap();
        assert_eq!(a.flat_values().unwrap(), b.flat_values().unwrap());

        let bad = vec![("x.w".to_string(), Tensor::zeros(&[2, 3], DType::F64, &Device::Cpu).unwrap())];
        assert!(b.load(&bad).is_err());
        assert!(b.load(&[]).is_err());
    }

    #[test]
    fn builder_prefixes_names() {
        let mut s = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        {
            let mut b = Builder::new(&mut s, &mut rng);
            let mut enc = b.sub("enc");
            enc.sub("0").param("w", &[1], Init::Const(2.0)).unwrap();
        }
        assert!(s.get("enc.0.w").is_some());
    }
}
