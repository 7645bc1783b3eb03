//! Click-prediction toolkit built around a frequency-filtered transformer
//! and GRU click model.
//!
//! The crate is organized as a small stack: [`tensor`] provides dense 64-bit
//! tensors, a real FFT, and reverse-mode differentiation; [`clicklog`]
//! handles session logs, vocabularies, splits, batching, and synthetic
//! position-based data; [`model`] assembles the click model itself;
//! [`train`] runs Adam with early stopping and checkpointing; [`eval`]
//! computes perplexity and log-likelihood plus reference predictors; and
//! [`diagnostics`] bundles the gradient-check suite used by the CLI.

#![forbid(unsafe_code)]

pub mod clicklog;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
