//! Unsupervised discovery of phoneme-specific critical articulators.
//!
//! Three transformer networks are trained end to end: acoustic-to-articulatory
//! inversion (AAI), articulator weight prediction (AWP) and a frame-level
//! phoneme classifier (FPC) that sees the articulators scaled by the
//! predicted weights. Nothing supervises the weights directly; the classifier
//! loss pulls them toward the articulators that matter for each phoneme.

pub mod analyze;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
