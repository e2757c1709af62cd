//! Contrastive predictive coding objectives (CPC, aligned CPC and its
//! two-level variant) over raw 16 kHz audio, a cosine-dissimilarity boundary
//! detector, and the segmentation and categorisation evaluation harness used
//! to verify them on a synthetic corpus.

pub mod boundary;
pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
