//! Weakly supervised segmentation of diffuse stain with a dual-codebook
//! vector-quantized autoencoder and a four-way adversarial classifier.
//!
//! A shared codebook `S` reconstructs negative patches; positive patches may
//! also draw on a class codebook `C`. At inference, pixels whose feature cell
//! picks a `C` code form the mask.

pub mod adversarial;
pub mod autoencoder;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod segmentation;
pub mod training;

pub use error::{CaclError, Result};
