//! Mixture-of-prompt-experts (MoPE) multimodal prompt fusion lab.
//!
//! A frozen main-modality transformer is adapted by per-layer prompts
//! decomposed into a shared static prompt, an instance-wise dynamic prompt
//! produced by routing over prompt experts, and a mapped prompt projected
//! from the complementary modality. Includes a synthetic paired-modality
//! benchmark, a deterministic trainer, and an empirical lab for the
//! attention-discrepancy adaptivity claims.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod encoder;
pub mod fusion;
pub mod gradcheck;
pub mod lab;
pub mod params;
pub mod report;
pub mod router;
pub mod trainer;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
