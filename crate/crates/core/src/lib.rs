//! Response diversity of repeated LLM sampling as a proxy for failure.
//!
//! Sample a prompt `m` times, normalize each response to a set of answer
//! elements, and summarize disagreement with entropy, Gini impurity or the
//! mean distance of response embeddings to their centroid. Higher diversity
//! tracks a higher chance that the majority answer is wrong.

pub mod analysis;
pub mod answers;
pub mod cli;
pub mod datasets;
pub mod embedding;
pub mod error;
pub mod measures;
pub mod predictor;
pub mod providers;
pub mod selection;
pub mod transport;

pub use error::{Error, Result};
