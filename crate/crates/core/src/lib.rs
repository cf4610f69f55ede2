//! Hyperspectral denoising with a non-i.i.d. mixture-of-Gaussians noise model
//! fused with ARD low-rank matrix factorization, fitted by closed-form
//! variational Bayes.
//!
//! The pipeline: [`hsi`] loads and reshapes cubes, [`noise`] and [`lowrank`]
//! hold the coordinate updates, [`inference`] drives them, [`noise_sim`]
//! produces synthetic corruptions and [`metrics`] scores restorations.

pub mod cli;
pub mod elbo;
pub mod error;
pub mod hsi;
pub mod inference;
pub mod lowrank;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod noise_sim;
pub mod special;

pub use error::{Error, Result};
pub use hsi::{Cube, ObservationMatrix};
pub use inference::{denoise, run, InferenceConfig, InferenceOutput, InferenceReport};
pub use model::{ArdPosterior, FactorState, Hyperparams, NoiseLocation, NoiseState};
