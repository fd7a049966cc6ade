//! Unsupervised speaker normalization and acoustic unit discovery.
//!
//! A factored VAE with an adversarial contrastive-predictive-coding critic
//! separates an utterance-level style embedding from a frame-rate content
//! sequence. Every utterance of a corpus is converted to the corpus' style
//! medoid and the converted signals are segmented into acoustic units by a
//! VAE whose latent prior is a hidden Markov model.
//!
//! Module map:
//!
//! - [`dataio`]: manifests, WAV ingestion, language-homogeneous batches
//! - [`features`]: log-mel recipes, normalization, Griffin-Lim inversion
//! - [`autodiff`] and [`nn`]: a small reverse-mode tape and the layers built on it
//! - [`fvae`]: factored VAE with adversarial CPC
//! - [`normalizer`]: style extraction, medoid selection, conversion
//! - [`hmmvae`]: HMM-VAE training, Viterbi alignment, unit decoding
//! - [`metrics`]: NMI, cluster purity, boundary F-score
//! - [`pipeline`]: configuration, stage orchestration, reports

pub mod autodiff;
pub mod checkpoint;
pub mod dataio;
mod error;
pub mod features;
pub mod fvae;
pub mod hmmvae;
pub mod metrics;
pub mod nn;
pub mod normalizer;
pub mod pipeline;

pub use error::{Error, Result};

/// Sampling rate every waveform is brought to at ingestion.
pub const SAMPLE_RATE: u32 = 16_000;

/// Frame shift of both feature recipes, in seconds.
pub const HOP_SECONDS: f64 = 0.01;
