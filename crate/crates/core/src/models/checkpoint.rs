use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::nn::{Adam, AdamConfig, ParamStore};

const META_KEY: &str = "ctmar";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mar,
    Cqa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: ModelKind,
    pub architecture: serde_json::Value,
    pub epoch: usize,
    pub optimizer_step: u64,
    pub optimizer: Option<AdamConfig>,
    pub rng_state: Option<serde_json::Value>,
    pub stats: serde_json::Value,
    pub config_hash: String,
}

/// Named tensors grouped by prefix (`model.`, `teacher.`, `adam.`, ...) plus JSON metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, architecture: serde_json::Value) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                kind,
                architecture,
                epoch: 0,
                optimizer_step: 0,
                optimizer: None,
                rng_state: None,
                stats: serde_json::Value::Null,
                config_hash: String::new(),
            },
            tensors: Vec::new(),
        }
    }

    pub fn insert_group(&mut self, prefix: &str, tensors: Vec<(String, Tensor)>) {
        self.tensors.retain(|(n, _)| !n.starts_with(&format!("{prefix}.")));
        self.tensors.extend(tensors.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
    }

    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        self.insert_group(prefix, store.snapshot()?);
        Ok(())
    }

    pub fn insert_optimizer(&mut self, opt: &Adam) {
        self.meta.optimizer = Some(opt.config);
        self.meta.optimizer_step = opt.step_count();
        self.insert_group("adam", opt.state());
    }

    /// Tensors stored under `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn has_group(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    pub fn load_store(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        store.load(&self.group(prefix))
    }

    pub fn load_optimizer(&self, opt: &mut Adam) -> Result<()> {
        if let Some(cfg) = self.meta.optimizer {
            opt.config = cfg;
        }
        opt.load_state(self.meta.optimizer_step, &self.group("adam"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buffers: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let flat = t.flatten_all()?;
            let (dtype, bytes) = match t.dtype() {
                DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
                _ => (Dtype::F32, flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
            };
            buffers.push((name.clone(), dtype, t.dims().to_vec(), bytes));
        }
        let views = buffers
            .iter()
            .map(|(n, d, s, b)| Ok((n.as_str(), TensorView::new(*d, s.clone(), b).map_err(|e| CoreError::Serde(e.to_string()))?)))
            .collect::<Result<Vec<_>>>()?;
        let meta = serde_json::to_string(&self.meta).map_err(|e| CoreError::Serde(e.to_string()))?;
        let bytes = safetensors::serialize(views, Some(HashMap::from([(META_KEY.to_string(), meta)])))
            .map_err(|e| CoreError::Serde(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |reason: String| CoreError::CorruptCheckpoint { path: path.to_path_buf(), reason };
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| corrupt("metadata block missing".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| corrupt(e.to_string()))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", meta.format_version)));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let mut tensors = Vec::with_capacity(st.len());
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let data = view.data();
            let t = match view.dtype() {
                Dtype::F64 => {
                    let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                Dtype::F32 => {
                    let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                other => return Err(corrupt(format!("unsupported dtype {other:?} for {name}"))),
            };
            tensors.push((name, t));
        }
        // Safetensors orders by offset; restore a stable name order.
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Checkpoint { meta, tensors })
    }
}
