//! Masked-autoencoder pretraining and regression fine-tuning for 1D X-ray
//! fluorescence spectra.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod network;
pub mod optimize;
pub mod patch_mask;
pub mod plot;
pub mod rng;
pub mod saliency;
pub mod synthetic;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};
