//! Single-shot embedding dimension search for CTR models: pretraining,
//! saliency-based one-pass pruning under a parameter budget, and
//! dimension-aligned slim retraining.

pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod slim;
pub mod real;

pub use error::{Error, Result};
