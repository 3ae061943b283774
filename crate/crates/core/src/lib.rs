//! # avlink
//!
//! Desk-scale audio-to-video translation through linked latent spaces.
//!
//! The pipeline compresses mel-spectrogram segments and grayscale images
//! into compatible latent spaces with MLP variational autoencoders, shapes
//! the audio latent with temporal-smoothness and style/content priors,
//! links the two spaces with a cycle-consistency loss, and measures
//! information throughput (round-trip SNR) and trajectory smoothness.
//!
//! Pipeline stages:
//!
//! ```text
//! WAV -> mel segments -> audio VAE -> content latent -> image decoder -> frames
//!                                          ^                   |
//!                                          +-- cycle loss <----+
//! ```
//!
//! Modules map onto the stages: [`audio`] (mel frontend), [`synth`]
//! (labeled synthetic corpora), [`pca`] (whitened-PCA baseline codec),
//! [`vae`] (MLP VAE with manual gradients), [`priors`] (smoothness and
//! disentanglement losses), [`link`] (training, cycle refinement and the
//! translation pipelines), and [`metrics`] (SNR, latent velocity, MDS).

pub mod audio;
pub mod config;
pub mod corpus;
pub mod error;
pub mod link;
pub mod mat;
pub mod metrics;
pub mod pca;
pub mod pgm;
pub mod priors;
pub mod synth;
pub mod vae;
pub mod wav;

pub use error::{Error, Result};
pub use mat::Mat;
