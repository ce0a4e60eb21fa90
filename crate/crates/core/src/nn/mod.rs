//! Minimal neural-network layer kit on top of candle tensors.

pub mod adam;
pub mod layers;
pub mod ops;
pub mod params;

pub use adam::{halving_lr, Adam, AdamConfig, LR_HALVING_EPOCHS};
pub use layers::{global_avg_pool, ChannelNorm, Conv2d, ConvSpec, Linear};
pub use params::{Builder, Init, ParamStore};
