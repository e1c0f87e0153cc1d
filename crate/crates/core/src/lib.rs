//! Phenotype-guided cardiac cine generation.
//!
//! A phenotype VAE draws cardiac measurement vectors; a 3D convolutional VAE
//! compresses cines into latent grids; a masked autoregressive transformer
//! with a per-token diffusion head generates those grids conditioned on the
//! phenotypes. Downstream utilities pretrain masked autoencoders on real and
//! synthetic cines and evaluate them on classification and regression.

pub mod checkpoint;
pub mod cine_vae;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod downstream;
pub mod error;
pub mod export;
pub mod mar;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod phantom;
pub mod pheno_vae;
pub mod sampler;

pub use error::{Error, Result};

#[cfg(feature = "testing")]
pub mod testing;
