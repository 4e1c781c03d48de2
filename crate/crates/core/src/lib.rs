//! Conditional generative models for multichannel ECG time series and the
//! evaluation protocol for the synthetic data they produce.

pub mod classifier;
pub mod config;
pub mod dsp;
pub mod nn;
pub mod error;
pub mod eval;
pub mod flow;
pub mod generators;
pub mod record;
pub mod rng;
pub mod similarity;
pub mod synth;
pub mod vqvae;
pub mod ddpm;

pub use error::{Error, Result};
