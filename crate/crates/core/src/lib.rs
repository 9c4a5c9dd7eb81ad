//! Drag-based latent editing over a small diffusion backbone.
//!
//! The crate bundles everything needed to run and evaluate alternating
//! drag-and-denoise editing at desk scale:
//!
//! * [`diffusion`]: noise schedule, DDIM denoising and inversion.
//! * [`denoiser`]: the noise-predictor contract plus an analytic Gaussian
//!   model and a small convolutional network with reverse-mode gradients.
//! * [`trainer`]: procedural blob scenes and the ε-prediction training loop.
//! * [`drag`]: motion supervision, point tracking and the two editing
//!   schedules.
//! * [`metrics`]: DAI, fidelity, drift diagnostics and rank correlation.
//! * [`gscore`]: client for LMM-based perceptual scoring.
//! * [`bench`]: case manifests, fixture suite and experiment runners.

pub mod denoiser;
pub mod bench;
pub mod diffusion;
pub mod drag;
pub mod gscore;
pub mod error;
pub mod io;
pub mod metrics;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
