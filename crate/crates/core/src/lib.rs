//! Circuit analysis of three-letter acronym prediction in GPT-2 Small.
//!
//! The crate bundles a byte-level BPE tokenizer, a hookable GPT-2 forward pass,
//! the acronym prompt dataset and the experiments built on top of them:
//! activation patching, circuit ablation, head analysis and positional swaps.

pub mod circuit;
pub mod dataset;
pub mod error;
pub mod heads;
pub mod model;
pub mod patching;
pub mod positional;
pub mod report;
pub mod task;
pub mod tensor;
pub mod tokenizer;
pub mod toy;

pub use error::{Error, Result};
