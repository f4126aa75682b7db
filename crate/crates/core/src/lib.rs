//! Transformer-in-Transformer backbones for deep reinforcement learning.
//!
//! An inner Transformer encodes each observation at the patch level and
//! summarizes it in a class token; an outer causal Transformer relates the
//! class tokens of the last `K` observations. The crate ships both wirings
//! (vanilla and enhanced), the ablation variants, a return-conditioned
//! sequence model, the small autodiff engine they run on, two desk-scale
//! environments, and the trainers and tools used to exercise them.

pub mod autodiff;
pub mod backbone;
pub mod blocks;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod training;

pub use error::{Result, TitError};
