//! The two trainable networks and their checkpoint format.

pub mod checkpoint;
pub mod cqa_net;
pub mod mar;

pub use checkpoint::{Checkpoint, CheckpointMeta, ModelKind};
pub use cqa_net::{CqaConfig, CqaNet, CqaOutput, NUM_CLASSES};
pub use mar::{InputMode, MarConfig, MarNet};
