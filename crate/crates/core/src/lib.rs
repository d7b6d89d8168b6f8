//! Cascaded context enhancement network for binary lesion segmentation,
//! trained from scratch on the CPU with a small reverse-mode autograd.
//!
//! Layout:
//! - [`tensor`]: rank-4 `f64` tensors and the define-by-run tape.
//! - [`nn`]: parameters, convolution layers, encoder, pyramid pooling.
//! - [`cca`] / [`cgl`]: gated cascade of context and context-guided affinity.
//! - [`model`]: network assembly, losses, schedule, optimizer.
//! - [`data`], [`metrics`], [`train`]: datasets, evaluation, training.

pub mod cca;
pub mod cgl;
pub mod data;
mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
