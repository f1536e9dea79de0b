//! Variational autoencoders for cellular perturbation and drug response.
//!
//! The crate provides a reverse-mode autodiff core over dense `f64` tensors
//! ([`tensor`]), reparameterized Gaussian machinery ([`prob`]), inverse
//! autoregressive flow posteriors ([`flows`]), two generative models
//! ([`pertvae`] for paired perturbation data, [`drvae`] adding a
//! semi-supervised response pathway), classical baselines ([`baselines`]),
//! ranking metrics and rank tests ([`metrics`]), synthetic data generators
//! ([`synth`]), and a deterministic cross-validation harness ([`cv`],
//! [`experiment`], [`report`]).
//!
//! Start from the runnable examples in `examples/`, one per capability.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cv;
pub mod data;
pub mod drvae;
pub mod error;
pub mod experiment;
pub mod flows;
pub mod metrics;
pub mod pertvae;
pub mod prob;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod training;

pub use cli::run_cli;
pub use error::{Error, Result};
