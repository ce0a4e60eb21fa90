use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{global_avg_pool, ops, Builder, Conv2d, ConvSpec, ParamStore};

/// Which images the MAR network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    #[default]
    Artifact,
    Li,
    Concat,
}

impl InputMode {
    pub fn needs_li(self) -> bool {
        !matches!(self, InputMode::Artifact)
    }

    fn channels(self) -> usize {
        if self == InputMode::Concat {
            2
        } else {
            1
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "artifact" => Ok(InputMode::Artifact),
            "li" => Ok(InputMode::Li),
            "concat" => Ok(InputMode::Concat),
            other => Err(format!("unknown input mode {other:?} (artifact, li, concat)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarConfig {
    pub depth: usize,
    pub base_width: usize,
    pub input_mode: InputMode,
    pub channel_reduction: usize,
    pub leaky_slope: f64,
}

impl Default for MarConfig {
    fn default() -> Self {
        MarConfig { depth: 4, base_width: 32, input_mode: InputMode::Artifact, channel_reduction: 4, leaky_slope: 0.2 }
    }
}

impl MarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.depth) {
            return invalid(format!("MAR depth {} outside 2..=6", self.depth));
        }
        if self.base_width == 0 || self.channel_reduction == 0 {
            return invalid("MAR width and channel reduction must be positive");
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

struct DoubleConv {
    c1: Conv2d,
    c2: Conv2d,
}

impl DoubleConv {
    fn new(b: &mut Builder<'_>, cin: usize, cout: usize) -> Result<Self> {
        Ok(DoubleConv {
            c1: Conv2d::new(&mut b.sub("conv1"), ConvSpec::same(cin, cout, 3))?,
            c2: Conv2d::new(&mut b.sub("conv2"), ConvSpec::same(cout, cout, 3))?,
        })
    }

    fn forward(&self, x: &Tensor, slope: f64) -> Result<Tensor> {
        let h = ops::leaky_relu(&self.c1.forward(x)?, slope)?;
        ops::leaky_relu(&self.c2.forward(&h)?, slope)
    }
}

/// Additive spatial attention on a skip feature, gated by the decoder signal.
struct SpatialGate {
    wx: Conv2d,
    wg: Conv2d,
    psi: Conv2d,
}

impl SpatialGate {
    fn new(b: &mut Builder<'_>, channels: usize, inner: usize) -> Result<Self> {
        Ok(SpatialGate {
            wx: Conv2d::new(&mut b.sub("wx"), ConvSpec::same(channels, inner, 1))?,
            wg: Conv2d::new(&mut b.sub("wg"), ConvSpec::same(channels, inner, 1))?,
            psi: Conv2d::new(&mut b.sub("psi"), ConvSpec::same(inner, 1, 1))?,
        })
    }

    fn forward(&self, skip: &Tensor, gate: &Tensor) -> Result<Tensor> {
        let a = (self.wx.forward(skip)? + self.wg.forward(gate)?)?.relu()?;
        ops::sigmoid(&self.psi.forward(&a)?)
    }
}

/// Squeeze-and-excitation style channel weights.
struct ChannelGate {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl ChannelGate {
    fn new(b: &mut Builder<'_>, channels: usize, inner: usize) -> Result<Self> {
        Ok(ChannelGate {
            fc1: Conv2d::new(&mut b.sub("fc1"), ConvSpec::same(channels, inner, 1))?,
            fc2: Conv2d::new(&mut b.sub("fc2"), ConvSpec::same(inner, channels, 1))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, _, _) = x.dims4()?;
        let pooled = global_avg_pool(x)?.reshape((n, c, 1, 1))?;
        let h = self.fc1.forward(&pooled)?.relu()?;
        ops::sigmoid(&self.fc2.forward(&h)?)
    }
}

struct DecoderLevel {
    up: Conv2d,
    spatial: SpatialGate,
    channel: ChannelGate,
    block: DoubleConv,
}

/// Gate activations from one forward pass, coarsest level first.
pub struct GateMaps {
    pub spatial: Vec<Tensor>,
    pub channel: Vec<Tensor>,
}

/// Attention U-Net predicting an artifact-reduced image as a residual correction.
pub struct MarNet {
    config: MarConfig,
    store: ParamStore,
    encoder: Vec<DoubleConv>,
    decoder: Vec<DecoderLevel>,
    head: Conv2d,
}

impl MarNet {
    pub fn new(config: MarConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let mut encoder = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let cin = if l == 0 { config.input_mode.channels() } else { config.width(l - 1) };
            encoder.push(DoubleConv::new(&mut b.sub(&format!("enc{l}")), cin, config.width(l))?);
        }
        let mut decoder = Vec::with_capacity(config.depth - 1);
        for l in (0..config.depth - 1).rev() {
            let w = config.width(l);
            let inner = (w / config.channel_reduction).max(1);
            let mut lb = b.sub(&format!("dec{l}"));
            decoder.push(DecoderLevel {
                up: Conv2d::new(&mut lb.sub("up"), ConvSpec::same(config.width(l + 1), w, 3))?,
                spatial: SpatialGate::new(&mut lb.sub("spatial_gate"), w, inner)?,
                channel: ChannelGate::new(&mut lb.sub("channel_gate"), w, inner)?,
                block: DoubleConv::new(&mut lb.sub("block"), 2 * w, w)?,
            });
        }
        let head = Conv2d::new(&mut b.sub("head"), ConvSpec::same(config.width(0), 1, 1).gain(0.1))?;
        Ok(MarNet { config, store, encoder, decoder, head })
    }

    /// Independent copy with identical parameter values.
    pub fn duplicate(&self) -> Result<MarNet> {
        let copy = MarNet::new(self.config, 0, self.dtype())?;
        copy.store.copy_from(&self.store)?;
        Ok(copy)
    }

    pub fn config(&self) -> &MarConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Smallest image side accepted: divisible by the total downsampling factor.
    pub fn side_multiple(&self) -> usize {
        1 << (self.config.depth - 1)
    }

    fn check_inputs(&self, x: &Tensor, li: Option<&Tensor>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return invalid(format!("MAR input must have one channel, got {c}"));
        }
        let m = self.side_multiple();
        if h % m != 0 || w % m != 0 {
            return invalid(format!("image {h}x{w} not divisible by {m}"));
        }
        match (self.config.input_mode.needs_li(), li) {
            (true, None) => invalid(format!("input mode {:?} requires LI images", self.config.input_mode)),
            (true, Some(l)) if l.dims() != x.dims() => invalid("LI batch shape differs from artifact batch"),
            _ => Ok(()),
        }
    }

    pub fn forward(&self, x: &Tensor, li: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_gates(x, li)?.0)
    }

    pub fn forward_with_gates(&self, x: &Tensor, li: Option<&Tensor>) -> Result<(Tensor, GateMaps)> {
        self.check_inputs(x, li)?;
        let slope = self.config.leaky_slope;
        let (input, base) = match self.config.input_mode {
            InputMode::Artifact => (x.clone(), x.clone()),
            InputMode::Li => {
                let l = li.expect("checked").clone();
                (l.clone(), l)
            }
            InputMode::Concat => (Tensor::cat(&[x, li.expect("checked")], 1)?, x.clone()),
        };
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = input;
        for (l, enc) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = ops::avg_pool2x(&h)?;
            }
            h = enc.forward(&h, slope)?;
            skips.push(h.clone());
        }
        let mut gates = GateMaps { spatial: Vec::new(), channel: Vec::new() };
        for (i, level) in self.decoder.iter().enumerate() {
            let skip = &skips[self.config.depth - 2 - i];
            let up = ops::leaky_relu(&level.up.forward(&ops::upsample2x(&h)?)?, slope)?;
            let sa = level.spatial.forward(skip, &up)?;
            let ca = level.channel.forward(skip)?;
            let gated = skip.broadcast_mul(&sa)?.broadcast_mul(&ca)?;
            h = level.block.forward(&Tensor::cat(&[&gated, &up], 1)?, slope)?;
            gates.spatial.push(sa);
            gates.channel.push(ca);
        }
        let out = (base + self.head.forward(&h)?)?;
        Ok((out, gates))
    }
}
