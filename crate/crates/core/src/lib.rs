//! Confidence calibration for sampled LLM answers.
//!
//! Responses to a question are embedded, grouped into a consistency graph,
//! and scored by a small graph convolutional network trained to predict
//! whether each response is correct.

pub mod baselines;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod ingest;
pub mod labeling;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
