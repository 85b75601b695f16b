//! Prediction of occupancy grids for intersection traffic.
//!
//! The library turns a traffic scenario (road layout, participants, and
//! multi-hypothesis trajectories) into an augmented occupancy grid of the
//! present and a probabilistic occupancy grid of a future instant, then
//! learns that mapping three ways: latent codes + per-cell classification
//! forests, latent-to-latent regression forests between two autoencoder
//! stacks, and a strided conv/deconv network with a per-pixel softmax.
//!
//! Modules mirror the pipeline: [`grid`] (containers, quantization,
//! metrics, file format), [`scenario`] (simulation and rasterization),
//! [`autoencoder`] / [`forest`] / [`deconvnet`] (the learners), and
//! [`pipelines`] (end-to-end architectures, evaluation, bundles).

pub mod autoencoder;
pub mod binio;
pub mod deconvnet;
pub mod error;
pub mod forest;
pub mod grid;
pub mod pipelines;
pub mod scenario;
pub mod seed;

pub use error::{Error, Result};
