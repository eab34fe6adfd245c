//! Token-disentangled transformer for feed-forward novel view synthesis.
//!
//! A desk-scale, CPU-only implementation: a minimal reverse-mode autodiff
//! engine, Plücker-ray tokenization, the plain / Tok-D / Tok-D-Plus block
//! variants, procedural multi-view data generation, a deterministic training
//! loop, and image-quality metrics.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod gradcheck;
pub mod nn;
pub mod geometry;
pub mod noise_warp;
pub mod tokenizer;
pub mod blocks;
pub mod model;
pub mod scenegen;
pub mod datapipe;
pub mod trainer;
pub mod metrics;
pub mod analysis;
pub mod experiments;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
