//! Adversarially robust encoders and the models built on their features: feature inversion,
//! multi-level style transfer, wavelet-skip denoising and latent-space anomaly detection.

pub mod adversarial;
pub mod anomaly;
pub mod architectures;
pub mod data;
pub mod denoising;
pub mod error;
pub mod harness;
pub mod inversion;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod style_transfer;
pub mod toy;
pub mod wavelets;

pub use error::{Error, Result};
