//! Residual-generation latent diffusion for shadow removal, self-contained
//! at desk scale: schedules, the forward/backward residual diffusion
//! processes, a noise-residual decomposition sampler, a small hand-rolled
//! neural network core with a control branch, EMA self-enhancement training,
//! a detail-preserving decoder, a procedural shadow dataset, and
//! region-decomposed image metrics.
//!
//! See the `examples/` directory for one runnable example per capability and
//! the `shadowdiff` binary for the staged pipeline.

pub mod error;
pub mod tensor;
pub mod schedule;
pub mod diffusion;
pub mod nn;
pub mod denoiser;
pub mod training;
pub mod autoencoder;
pub mod imageio;
pub mod synthdata;
pub mod metrics;
pub mod checkpoint;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
