//! Flow-matching and mean-flow speech enhancement on synthetic signals.

pub mod checkpoint;
pub mod config;
pub mod corpus;
mod error;
pub mod flow_path;
pub mod metrics;
pub mod network;
pub mod optimizer;
pub mod pipeline;
pub mod sampler;
pub mod stft;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
