//! Vision-only diffusion policy, desk scale.
//!
//! The crate implements the full pipeline — transformer visual encoder with
//! alternating frame/global attention, semantic–geometric cross-attention
//! fusion, CNN spatial compression, and a DDPM action head — on top of a
//! small tape-based autodiff engine, together with a deterministic 2-D
//! pick-and-place environment, a scripted expert, a training loop, and a
//! closed-loop evaluation harness.

pub mod ckpt;
pub mod compressor;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod env;
pub mod fuser;
pub mod model;
pub mod nn;
pub mod policy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
