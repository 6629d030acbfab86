//! Desk-scale two-view RGB-D video generation.
//!
//! The crate covers the full pipeline: a minimal f32 autodiff engine
//! ([`tensor`]), pinhole/SE(3) geometry and pointmaps ([`geometry`]), a
//! procedural multi-view episode generator ([`synthscene`]), a two-view
//! token denoiser with cross-view attention ([`model`]), the diffusion
//! schedule, losses, training loop and sampler ([`diffusion`]), evaluation
//! metrics ([`metrics`]), and gripper trajectory extraction from generated
//! 4D video ([`trajectory`]). The `g4d` binary drives everything; the
//! `examples/` directory shows each capability in isolation.

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod synthscene;
pub mod oracle;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};
