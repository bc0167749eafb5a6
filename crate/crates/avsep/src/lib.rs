//! Single-frame visually conditioned sound source separation.
//!
//! A conditioning embedding derived from one image channel-weights a sound
//! network's spectrogram feature maps to predict a binary separation mask.
//! The crate bundles the deterministic DSP pipeline, a synthetic
//! audio-visual corpus, the differentiable building blocks and training
//! loop, and bss_eval-style scoring.

pub mod dsp;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod separation;
pub mod synthdata;
pub mod tensor;

pub use error::{AvsepError, Result};
