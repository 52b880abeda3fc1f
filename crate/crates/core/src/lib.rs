//! Split inference under network delay: a local segmenter fuses features
//! from a remote model that is told how stale its output will be.

pub mod channel;
pub mod config;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nnkit;
pub mod runtime;
pub mod scene;

pub use error::{Error, Result};
