//! Multi-stream sign-word recognition downstream of landmark extraction.
//!
//! Feature records go in; trained early/late-fusion transformer classifiers,
//! a genetically searched ensemble head and a sliding-window sentence
//! decoder come out.

pub mod cli;
pub mod decoder;
pub mod ensemble;
pub mod error;
pub mod featurestore;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
