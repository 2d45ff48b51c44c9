//! Speaker verification with segment attentive embeddings.
//!
//! Pipeline: PCM audio → log-mel features → 50%-overlap segments → LSTM
//! segment embeddings → multi-head attentive pooling → GE2E training →
//! cosine scoring and EER.

mod codec;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod loss;
pub mod manifest;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod segmenter;
pub mod synth;
pub mod trainer;

pub use codec::write_atomic;
pub use error::{Error, Result};
