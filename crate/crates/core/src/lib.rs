//! Weakly-supervised anomaly detection over per-snippet feature tensors.
//!
//! Only video-level normal/abnormal labels are available at training time.
//! The model keeps running per-channel statistics of its hidden features;
//! the divergence of a snippet's features from the running mean acts as the
//! abnormality criterion driving snippet selection, the pull-push margin
//! loss, and the final fused anomaly score.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod selection;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub mod cli;

pub use error::{Error, Result};
