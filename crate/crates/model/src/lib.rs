//! Neural components of the motionflow pipeline.
//!
//! A transformer VAE compresses normalized motion into a short latent
//! sequence. Its latent is split into a token part, quantized by a
//! multi-scale residual quantizer, and a continuous part regularized by
//! teacher–student distillation; a coupling network fuses both into the
//! generation endpoint. A conditional flow head learns the velocity field
//! that transports Gaussian noise to that endpoint given a caption, and the
//! trainer runs the three stages (autoencoder, decoder refinement, flow).

pub mod autoencoder;
pub mod batch;
pub mod checkpoint;
pub mod coupling;
pub mod distill;
pub mod error;
pub mod flow;
pub mod flow_head;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rvq;
pub mod trainer;
pub mod vae;

pub use error::{ModelError, Result};
