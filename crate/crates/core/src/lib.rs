//! Flow-sequence network intrusion detection.
//!
//! NetFlow records are binned into per-feature tokens, grouped into ordered
//! windows of flows and fed to a small bidirectional transformer encoder
//! without positional encoding. The encoder is pretrained on benign traffic
//! with a masked-flow objective and then fine-tuned to label every flow of
//! a window as benign or malicious.

pub mod artifact;
pub mod config;
pub mod discretizer;
pub mod error;
pub mod evaluator;
pub mod flowset;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod sequence;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
