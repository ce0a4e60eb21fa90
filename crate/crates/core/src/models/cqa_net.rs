use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{global_avg_pool, ops, Builder, ChannelNorm, Conv2d, ConvSpec, Init, Linear, ParamStore};

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CqaConfig {
    pub image_size: usize,
    pub embed_dims: [usize; 3],
    pub heads: [usize; 3],
    pub blocks_per_scale: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub positional_bias: bool,
}

impl Default for CqaConfig {
    fn default() -> Self {
        CqaConfig {
            image_size: 128,
            embed_dims: [32, 64, 128],
            heads: [1, 2, 4],
            blocks_per_scale: 2,
            window: 8,
            mlp_ratio: 2,
            head_hidden: 256,
            positional_bias: true,
        }
    }
}

impl CqaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return invalid(format!("CQA image size {} must be a positive multiple of 8", self.image_size));
        }
        for s in 0..3 {
            if self.embed_dims[s] == 0 || self.heads[s] == 0 || self.embed_dims[s] % self.heads[s] != 0 {
                return invalid(format!("scale {s}: width {} not divisible by {} heads", self.embed_dims[s], self.heads[s]));
            }
        }
        if self.window == 0 || self.mlp_ratio == 0 || self.head_hidden == 0 {
            return invalid("window, mlp ratio and head width must be positive");
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.embed_dims.iter().sum()
    }

    /// Feature-map side at a scale (0-based).
    pub fn feature_side(&self, scale: usize) -> usize {
        self.image_size >> (scale + 1)
    }

    /// Effective attention window at a scale: the configured window, shrunk to divide the feature map.
    pub fn window_at(&self, scale: usize) -> usize {
        let side = self.feature_side(scale);
        let mut w = self.window.min(side);
        while side % w != 0 {
            w -= 1;
        }
        w
    }
}

/// Multi-head self-attention over non-overlapping square windows.
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    window: usize,
    bias_table: Option<Tensor>,
    rel_index: Tensor,
}

impl WindowAttention {
    fn new(b: &mut Builder<'_>, dim: usize, heads: usize, window: usize, positional_bias: bool) -> Result<Self> {
        let qkv = Linear::new(&mut b.sub("qkv"), dim, 3 * dim)?;
        let proj = Linear::new(&mut b.sub("proj"), dim, dim)?;
        let span = 2 * window - 1;
        let bias_table = if positional_bias {
            Some(b.param("rel_bias", &[span * span, heads], Init::Normal { std: 0.02 })?)
        } else {
            None
        };
        let n = window * window;
        let mut idx = Vec::with_capacity(n * n);
        for a in 0..n {
            for c in 0..n {
                let dy = (a / window) as i64 - (c / window) as i64 + window as i64 - 1;
                let dx = (a % window) as i64 - (c % window) as i64 + window as i64 - 1;
                idx.push((dy * span as i64 + dx) as u32);
            }
        }
        let rel_index = Tensor::from_vec(idx, n * n, &Device::Cpu)?;
        Ok(WindowAttention { qkv, proj, heads, window, bias_table, rel_index })
    }

    /// Attention within windows; `tokens` is (windows, window², C).
    pub fn forward_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let (bn, n, c) = tokens.dims3()?;
        let d = c / self.heads;
        let qkv = self.qkv.forward(tokens)?.reshape((bn, n, 3, self.heads, d))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut attn = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (d as f64).sqrt()))?;
        if let Some(table) = &self.bias_table {
            let bias = table.index_select(&self.rel_index, 0)?.reshape((n, n, self.heads))?.permute((2, 0, 1))?;
            attn = attn.broadcast_add(&bias.unsqueeze(0)?)?;
        }
        let attn = ops::softmax_last(&attn)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bn, n, c))?;
        self.proj.forward(&out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let ws = self.window;
        let (nh, nw) = (h / ws, w / ws);
        let tokens = x
            .permute((0, 2, 3, 1))?
            .reshape((b, nh, ws, nw, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b * nh * nw, ws * ws, c))?;
        let out = self.forward_tokens(&tokens)?;
        Ok(out
            .reshape((b, nh, nw, ws, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, h, w, c))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }
}

/// Learned complex per-channel transfer function applied in the 2D DFT domain.
pub struct FreqFilter {
    re: Var,
    im: Var,
    cos_m: Tensor,
    sin_m: Tensor,
    side: usize,
}

fn dft_matrices(n: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
    let mut c = Vec::with_capacity(n * n);
    let mut s = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            let a = 2.0 * PI * ((j * k) % n) as f64 / n as f64;
            c.push(a.cos());
            s.push(a.sin());
        }
    }
    let dev = Device::Cpu;
    Ok((Tensor::from_vec(c, (n, n), &dev)?.to_dtype(dtype)?, Tensor::from_vec(s, (n, n), &dev)?.to_dtype(dtype)?))
}

impl FreqFilter {
    fn new(b: &mut Builder<'_>, channels: usize, side: usize) -> Result<Self> {
        let re = b.param_var("re", &[1, channels, side, side], Init::Normal { std: 0.02 })?;
        let im = b.param_var("im", &[1, channels, side, side], Init::Normal { std: 0.02 })?;
        let (cos_m, sin_m) = dft_matrices(side, b.dtype())?;
        Ok(FreqFilter { re, im, cos_m, sin_m, side })
    }

    /// Replaces the filter values in place (used to probe the branch).
    pub fn set_transfer(&self, re: f64, im: f64) -> Result<()> {
        self.re.set(&(self.re.zeros_like()? + re)?)?;
        self.im.set(&(self.im.zeros_like()? + im)?)?;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, s) = (&self.cos_m, &self.sin_m);
        // Forward DFT: F = (C - iS) x (C - iS).
        let cx = c.broadcast_matmul(x)?;
        let sx = s.broadcast_matmul(x)?;
        let fr = (cx.broadcast_matmul(c)? - sx.broadcast_matmul(s)?)?;
        let fi = (sx.broadcast_matmul(c)? + cx.broadcast_matmul(s)?)?.neg()?;
        let gr = (fr.broadcast_mul(self.re.as_tensor())? - fi.broadcast_mul(self.im.as_tensor())?)?;
        let gi = (fi.broadcast_mul(self.re.as_tensor())? + fr.broadcast_mul(self.im.as_tensor())?)?;
        // Real part of the inverse DFT (C + iS) G (C + iS) / n².
        let cgr = c.broadcast_matmul(&gr)?;
        let sgr = s.broadcast_matmul(&gr)?;
        let cgi = c.broadcast_matmul(&gi)?;
        let sgi = s.broadcast_matmul(&gi)?;
        let real = (((cgr.broadcast_matmul(c)? - sgr.broadcast_matmul(s)?)? - cgi.broadcast_matmul(s)?)?
            - sgi.broadcast_matmul(c)?)?;
        Ok((real / (self.side * self.side) as f64)?)
    }
}

/// Intermediate outputs of one block, for probing.
pub struct BlockParts {
    pub normed: Tensor,
    pub attention: Tensor,
    pub spatial: Tensor,
    pub frequency: Tensor,
    pub output: Tensor,
}

/// Spatial-frequency transformer block: token mixer (W-MHSA + conv + Fourier filter) then MLP.
pub struct SfBlock {
    norm1: ChannelNorm,
    attention: WindowAttention,
    spatial: Conv2d,
    pub frequency: FreqFilter,
    norm2: ChannelNorm,
    mlp1: Conv2d,
    mlp2: Conv2d,
}

impl SfBlock {
    fn new(b: &mut Builder<'_>, cfg: &CqaConfig, scale: usize) -> Result<Self> {
        let dim = cfg.embed_dims[scale];
        let hidden = dim * cfg.mlp_ratio;
        Ok(SfBlock {
            norm1: ChannelNorm::new(&mut b.sub("norm1"), dim)?,
            attention: WindowAttention::new(
                &mut b.sub("attn"),
                dim,
                cfg.heads[scale],
                cfg.window_at(scale),
                cfg.positional_bias,
            )?,
            spatial: Conv2d::new(&mut b.sub("spatial"), ConvSpec::same(dim, dim, 3).groups(dim))?,
            frequency: FreqFilter::new(&mut b.sub("freq"), dim, cfg.feature_side(scale))?,
            norm2: ChannelNorm::new(&mut b.sub("norm2"), dim)?,
            mlp1: Conv2d::new(&mut b.sub("mlp1"), ConvSpec::same(dim, hidden, 1))?,
            mlp2: Conv2d::new(&mut b.sub("mlp2"), ConvSpec::same(hidden, dim, 1))?,
        })
    }

    pub fn attention(&self) -> &WindowAttention {
        &self.attention
    }

    pub fn forward_parts(&self, x: &Tensor) -> Result<BlockParts> {
        let normed = self.norm1.forward(x)?;
        let attention = self.attention.forward(&normed)?;
        let spatial = self.spatial.forward(&normed)?;
        let frequency = self.frequency.forward(&normed)?;
        let mixed = ((&attention + &spatial)? + &frequency)?;
        let h = (x + mixed)?;
        let m = self.mlp2.forward(&ops::gelu(&self.mlp1.forward(&self.norm2.forward(&h)?)?)?)?;
        let output = (h + m)?;
        Ok(BlockParts { normed, attention, spatial, frequency, output })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_parts(x)?.output)
    }
}

struct Stage {
    embed: Conv2d,
    embed_norm: ChannelNorm,
    blocks: Vec<SfBlock>,
}

pub struct CqaOutput {
    pub logits: Tensor,
    pub prob: Tensor,
    pub latent: Tensor,
    /// Feature maps after each of the three scales.
    pub features: Vec<Tensor>,
}

/// Three-scale spatial-frequency encoder with a 10-way quality head.
pub struct CqaNet {
    config: CqaConfig,
    store: ParamStore,
    stages: Vec<Stage>,
    fc1: Linear,
    fc2: Linear,
}

impl CqaNet {
    pub fn new(config: CqaConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let mut stages = Vec::with_capacity(3);
        for s in 0..3 {
            let cin = if s == 0 { 1 } else { config.embed_dims[s - 1] };
            let mut sb = b.sub(&format!("stage{s}"));
            let embed = Conv2d::new(&mut sb.sub("embed"), ConvSpec::same(cin, config.embed_dims[s], 3).stride(2))?;
            let embed_norm = ChannelNorm::new(&mut sb.sub("embed_norm"), config.embed_dims[s])?;
            let blocks = (0..config.blocks_per_scale)
                .map(|k| SfBlock::new(&mut sb.sub(&format!("block{k}")), &config, s))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { embed, embed_norm, blocks });
        }
        let fc1 = Linear::new(&mut b.sub("head.fc1"), config.latent_dim(), config.head_hidden)?;
        let fc2 = Linear::new(&mut b.sub("head.fc2"), config.head_hidden, NUM_CLASSES)?;
        Ok(CqaNet { config, store, stages, fc1, fc2 })
    }

    /// Independent copy with identical parameter values.
    pub fn duplicate(&self) -> Result<CqaNet> {
        let copy = CqaNet::new(self.config, 0, self.dtype())?;
        copy.store.copy_from(&self.store)?;
        Ok(copy)
    }

    pub fn config(&self) -> &CqaConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn block(&self, scale: usize, index: usize) -> &SfBlock {
        &self.stages[scale].blocks[index]
    }

    pub fn forward(&self, x: &Tensor) -> Result<CqaOutput> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h != w {
            return invalid(format!("CQA input must be square single-channel, got {c}x{h}x{w}"));
        }
        if h % 8 != 0 {
            return invalid(format!("CQA input side {h} not divisible by 8"));
        }
        if h != self.config.image_size {
            return invalid(format!("CQA built for {} px inputs, got {h}", self.config.image_size));
        }
        let mut feats = Vec::with_capacity(3);
        let mut pooled = Vec::with_capacity(3);
        let mut hcur = x.clone();
        for stage in &self.stages {
            hcur = stage.embed_norm.forward(&stage.embed.forward(&hcur)?)?;
            for block in &stage.blocks {
                hcur = block.forward(&hcur)?;
            }
            pooled.push(global_avg_pool(&hcur)?);
            feats.push(hcur.clone());
        }
        let latent = ops::l2_normalize_rows(&Tensor::cat(&pooled, 1)?, 1e-12)?;
        let logits = self.fc2.forward(&ops::gelu(&self.fc1.forward(&latent)?)?)?;
        let prob = ops::softmax_last(&logits)?;
        Ok(CqaOutput { logits, prob, latent, features: feats })
    }
}
