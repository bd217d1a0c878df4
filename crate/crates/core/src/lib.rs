//! Diffusion transformer policies for imitation learning.
//!
//! A noise-prediction network encodes camera images, proprioception and a
//! goal id into tokens, runs a transformer encoder that exposes every layer's
//! output, and denoises action chunks with a decoder whose blocks are
//! conditioned layer by layer (adaLN-Zero by default). The crate also ships
//! two synthetic imitation tasks, a training loop with finite-difference
//! gradient checks, closed-loop evaluation and an ablation harness.

pub mod autograd;
pub mod cli;
pub mod envs;
pub mod error;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod schedule;
pub mod tensor;
pub mod toy;
pub mod training;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
