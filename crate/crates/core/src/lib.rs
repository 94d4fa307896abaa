//! Self-supervised pre-training of sequence encoders by mutual-information
//! maximization between windows and whole sequences, with transfer to
//! downstream time-series classification.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: tensors, reverse-mode autodiff, Adam, gradient checks.
//! - [`synth`]: stable VAR simulators and labeled dataset construction.
//! - [`windows`]: overlapping window extraction.
//! - [`model`]: CNN encoder, bidirectional LSTM, attention readout, heads.
//! - [`objective`]: the InfoNCE contrastive loss and its evaluation metrics.
//! - [`io`]: binary tensor/checkpoint formats, configs, and reports.
//! - [`train`]: pre-training, transfer regimes, and the trial runner.
//! - [`eval`]: ROC AUC and learning-curve summaries.
//! - [`saliency`]: input-gradient attribution maps.

pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod objective;
pub mod saliency;
pub mod seeds;
pub mod selftest;
pub mod seqmodel;
pub mod synth;
pub mod train;
pub mod windows;

pub use error::{MilcError, Result};
