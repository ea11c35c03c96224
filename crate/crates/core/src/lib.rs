//! Toy diffusion transformer with attention-profiled block caching.
//!
//! Blocks are profiled by how much of their high-attention mass lands on the
//! foreground of the scene. Background-focused blocks are then skipped on
//! most denoising steps by re-adding the residual delta they produced at the
//! last full step.

pub mod cache;
pub mod dit;
pub mod error;
pub mod formats;
pub mod harness;
pub mod metrics;
pub mod profiler;
pub mod tensor;

pub use error::{Error, Result};
