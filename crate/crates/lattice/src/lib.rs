//! Attention-branch visual explanation generation with lattice feature
//! fusion, alternating-epoch gating of the attention branch, LoRA partial
//! fine-tuning of a frozen vision transformer, and a saliency evaluation
//! harness (insertion/deletion curves, IoU against reference masks, and
//! gradient-based baseline explainers).

pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod perception;
pub mod report;
pub mod saliency;
pub mod train;

pub use error::{Error, Result};
