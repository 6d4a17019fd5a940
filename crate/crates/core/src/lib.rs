//! Domain-generalizing multimodal misinformation detector.
//!
//! The crate covers the whole desk-scale pipeline: a small reverse-mode
//! tensor core, synthetic modality encoders, cross-modal interpolation
//! distillation with a moving-average teacher, spatial / temporal / affect
//! feature extraction, conditional feature diffusion, late-fusion
//! prediction, and a synthetic leave-one-domain-out benchmark.

pub mod affect;
pub mod cli;
pub mod bench;
pub mod config;
pub mod diffusion;
pub mod distill;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod numcore;
pub mod pipeline;
pub mod spatial;
pub mod temporal;
#[cfg(test)]
mod testref;

pub use error::{Error, Result};
