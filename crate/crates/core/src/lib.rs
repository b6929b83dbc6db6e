//! Two-stage deconfounder for disparity-aware binary prediction on tabular
//! records.
//!
//! Stage 1 trains a conditional variational autoencoder on
//! `(features, sensitive attributes)` with inverse-frequency propensity
//! weights ([`cvae`]); its posterior means serve as substitute confounders.
//! Stage 2 feeds features, sensitive attributes and the substitute
//! confounders through a latent-driven attention layer into an MLP
//! ([`predictor`]). Baselines, subgroup metrics ([`metrics`]) and a
//! structural-causal-model data generator ([`synth`]) support evaluation.

pub mod autodiff;
pub mod cvae;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod predictor;
pub mod synth;
pub mod tensor;

pub use autodiff::{Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::Tensor;
