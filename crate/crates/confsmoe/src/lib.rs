//! Confidence-guided sparse mixture-of-experts on synthetic multimodal
//! classification tasks: six routing mechanisms, two-stage missing-modality
//! imputation, a deterministic training harness, and numerical audits of the
//! routing-gradient theory (expert collapse, load-balance conflict).

pub mod analysis;
pub mod config;
pub mod error;
pub mod gating;
pub mod imputation;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod rng;
pub mod runio;
pub mod sweep;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
