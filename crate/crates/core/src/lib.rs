//! Structured policy representations.
//!
//! Trajectories from a population of behaviors are encoded as unordered sets of
//! state–action pairs into a variational latent space whose geometry is shaped
//! by per-objective contrastive ranking losses. The latent space supports
//! decoding back into a stochastic policy, value prediction, and test-time
//! behavior synthesis by constrained primal–dual optimization.
//!
//! Module map:
//! - [`env`]: synthetic two-objective point-mass environment and behavior family
//! - [`dataio`]: datasets, normalization, context sampling, two-view batches
//! - [`diffnet`]: parameters, MLPs with reverse-mode gradients, AdamW, gradient checks
//! - [`model`]: set encoder, projectors, value regressors, policy decoder
//! - [`losses`]: β-VAE, Rank-N-Contrast, orthonormality, value regression
//! - [`trainer`]: two-phase training, embedding bank, checkpoint bundles
//! - [`cfquad`]: Stein-kernel control-functional quadrature
//! - [`steer`]: tangent-projected primal–dual latent optimization
//! - [`evalkit`]: ordering, probing, imitation, steering benchmarks, plot data
//! - [`config`]: sectioned run configuration with canonical serialization

pub mod binio;
pub mod cfquad;
pub mod config;
pub mod dataio;
pub mod diffnet;
pub mod env;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod stats;
pub mod steer;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
