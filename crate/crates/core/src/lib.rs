//! Auditory attention decoding from two-channel ear-EEG.
//!
//! The crate covers the whole offline pipeline: speech feature extraction,
//! EEG preprocessing, forward (TRF) and backward linear models, a small CNN
//! decoder, a CCA + LDA decoder, nested cross-validation with segment-wise
//! attention markers, cluster-based permutation statistics and a synthetic
//! data generator with planted ground truth.

pub mod cca;
pub mod cnn;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod io;
pub mod linear;
pub mod signal;
pub mod synth;
pub mod trf_analysis;

pub use error::{AadError, Result};
