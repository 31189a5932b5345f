//! Multi-behavior sequential recommendation by latent diffusion.
//!
//! A masked autoencoder learns behavior-specific and behavior-agnostic
//! latent preferences; a conditional diffusion model maps the agnostic
//! latent to the latent of a chosen target behavior, which the decoder
//! scores against the item table.

pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod mbae;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
