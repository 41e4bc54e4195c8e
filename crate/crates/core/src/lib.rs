//! Desk-scale interleaved multimodal sequence modeling.

pub mod codec;
pub mod detok;
pub mod dynres;
pub mod error;
pub mod kernel;
pub mod mllm;
pub mod seqpack;
pub mod synth;
#[cfg(test)]
mod testutil;
pub mod trainer;
pub mod vitsim;

pub use error::{Error, Result};
