//! Contrastive dual-encoder training at desk scale.
//!
//! Two small towers map images (patch sets) and captions (token sequences)
//! into a shared unit sphere and are trained with the symmetric InfoNCE loss.
//! Around that core sit a source-debiased batch sampler, coin-flipping mixup,
//! a simulated multi-worker gather and decoupled gradient accumulation for
//! batches that do not fit in one forward pass.

pub mod config;
pub mod contrastive;
pub mod encoders;
pub mod engine;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mixup;
pub mod numerics;
pub mod sampling;
pub mod synthdata;
pub mod verify;

pub use error::{LabError, Result};
pub use numerics::{Matrix, SeedContext};
