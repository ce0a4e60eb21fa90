use candle_core::{Tensor, D};

use super::ops;
use super::params::{Builder, Init};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
    pub gain: f64,
}

impl ConvSpec {
    /// Same-size convolution with bias.
    pub fn same(cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec { cin, cout, kernel, stride: 1, padding: kernel / 2, groups: 1, bias: true, gain: 1.0 }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn gain(mut self, g: f64) -> Self {
        self.gain = g;
        self
    }
}

impl Conv2d {
    pub fn new(b: &mut Builder<'_>, spec: ConvSpec) -> Result<Self> {
        let fan_in = spec.cin / spec.groups * spec.kernel * spec.kernel;
        let weight = b.param(
            "weight",
            &[spec.cout, spec.cin / spec.groups, spec.kernel, spec.kernel],
            Init::HeUniform { fan_in, gain: spec.gain },
        )?;
        let bias = if spec.bias { Some(b.param("bias", &[spec.cout], Init::Zeros)?) } else { None };
        Ok(Conv2d { weight, bias, stride: spec.stride, padding: spec.padding, groups: spec.groups })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.weight, self.stride, self.padding, self.groups)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = b.param("weight", &[fan_in, fan_out], Init::HeUniform { fan_in, gain: 1.0 / 3f64.sqrt() })?;
        let bias = b.param("bias", &[fan_out], Init::Zeros)?;
        Ok(Linear { weight, bias })
    }

    /// Applies to the last dimension of an input of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().expect("rank >= 1");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, fan_in))?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer norm over the channel axis of NCHW tensors.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl ChannelNorm {
    pub fn new(b: &mut Builder<'_>, channels: usize) -> Result<Self> {
        let gamma = b.param("gamma", &[1, channels, 1, 1], Init::Const(1.0))?;
        let beta = b.param("beta", &[1, channels, 1, 1], Init::Zeros)?;
        Ok(ChannelNorm { gamma, beta })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm_channels(x, &self.gamma, &self.beta, 1e-5)
    }
}

/// Global average pool of NCHW to (N, C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
