pub mod config;
pub mod cqa;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod selftrain;

pub use error::{CoreError, Result};
