//! MeanFlow one-step generation on toy conditional 2D data.
//!
//! The crate bundles a small autodiff engine, a conditional average-velocity
//! MLP, the flow-matching and MeanFlow objectives, classifier-free guidance
//! (standard and scalar-rescaled), one-step / multi-step / Euler samplers,
//! toy datasets, an AdamW trainer, and the metrics and sweeps used to compare
//! them.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
