use candle_core::{DType, Tensor};

use crate::data::Split;
use crate::error::{invalid, Result};
use crate::nn::ops;

/// A stacked minibatch with the non-metal mask as a 0/1 tensor.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub x: Tensor,
    pub li: Option<Tensor>,
    pub y: Option<Tensor>,
    pub keep: Tensor,
}

impl Batch {
    /// Stacks the given samples. `with_li` and `with_target` select the optional channels.
    pub fn from_split(split: &Split, idx: &[usize], dtype: DType, with_li: bool, with_target: bool) -> Result<Batch> {
        if idx.is_empty() {
            return invalid("empty batch");
        }
        let side = split.side();
        let samples: Vec<_> = idx.iter().map(|&i| &split.samples[i]).collect();
        let x: Vec<&[f32]> = samples.iter().map(|s| s.require(&s.artifact, "artifact").map(|v| v.as_slice())).collect::<Result<_>>()?;
        let li = if with_li {
            let v: Vec<&[f32]> = samples.iter().map(|s| s.require(&s.li, "LI").map(|v| v.as_slice())).collect::<Result<_>>()?;
            Some(ops::stack_images(&v, side, dtype)?)
        } else {
            None
        };
        let y = if with_target {
            let v: Vec<&[f32]> = samples.iter().map(|s| s.require(&s.clean, "clean").map(|v| v.as_slice())).collect::<Result<_>>()?;
            Some(ops::stack_images(&v, side, dtype)?)
        } else {
            None
        };
        let keep: Vec<Vec<f32>> = samples
            .iter()
            .map(|s| s.metal_mask().map(|m| m.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect()))
            .collect::<Result<_>>()?;
        if let Some(k) = keep.iter().position(|k| !k.contains(&1.0)) {
            return invalid(format!("sample {} is entirely metal", samples[k].id));
        }
        let keep_refs: Vec<&[f32]> = keep.iter().map(|v| v.as_slice()).collect();
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            x: ops::stack_images(&x, side, dtype)?,
            li,
            y,
            keep: ops::stack_images(&keep_refs, side, dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
