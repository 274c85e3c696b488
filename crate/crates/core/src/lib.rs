//! Prompt refinement through an image-representation pivot.
//!
//! A user prompt is mapped by a preference encoder to a pivot, a matrix in
//! the space of a frozen image encoder. A prompt decoder conditioned on that
//! pivot then extends the user prompt into a system prompt. Both models are
//! warmed up separately on interaction logs and the encoder is then tuned
//! with PPO against a preference reward, all inside a synthetic
//! text-to-image world where the optimum is known.

// Dense numeric kernels read better with explicit indices.
#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod models;
pub mod oracles;
pub mod pipeline;
pub mod rl;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
