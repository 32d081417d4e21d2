//! End-to-end trainable audio-visual affect regression.
//!
//! This crate predicts continuous arousal and valence tracks (one value per
//! 40 ms frame, in [-1, 1]) directly from raw signal: a 1-d convolutional
//! front-end over the 16 kHz waveform, a residual network over face frames,
//! and a 2-layer LSTM over the fused per-frame features, all trained
//! against the concordance correlation coefficient rather than mean squared
//! error. Predictions pass through a fitted chain of median / centring /
//! scaling / time-shift corrections, and recurrent cells can be correlated
//! with acoustic descriptors to see what the model latched onto.
//!
//! A deterministic synthetic dataset (arousal drives the audio, valence the
//! video) stands in for licensed corpora so the whole pipeline is testable
//! from a clean checkout. See the book under `book/` for a guided tour.

pub mod analysis;
pub mod check;
pub mod error;
pub mod io;
pub mod lstm;
pub mod metrics;
pub mod postprocess;
pub mod rng;
pub mod speech;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod visual;

pub use error::{AffectError, Result};

#[cfg(doctest)]
mod book;
