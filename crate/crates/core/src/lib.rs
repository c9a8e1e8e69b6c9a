//! Desk-scale simulator for diffusion-based semantic image communication.
//!
//! A transmitter extracts a compact embedding from an image, sends it over an
//! AWGN channel, and a receiver regenerates a VQ latent with a conditional
//! latent-diffusion model before decoding it back to pixels. A classical
//! block-DCT + LDPC + QAM chain serves as the baseline.

pub mod baseline;
pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod semantic;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
