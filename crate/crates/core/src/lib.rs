//! Simulator for vertical federated learning with differentially private
//! activations, leave-one-out contribution scoring and token incentives.
//!
//! A run splits the feature columns of a dataset across clients. Each client
//! trains a bottom network and sends (optionally noised) embeddings to a
//! server, which trains a head over their concatenation and returns input
//! gradients. After warm-up the server scores clients, pays tokens, adapts
//! every client's ε and drops clients whose utility turns negative.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod client;
pub mod config;
pub mod contribution;
pub mod data;
pub mod dp;
pub mod epsilon;
pub mod error;
pub mod experiment;
pub mod incentive;
pub mod log;
pub mod matrix;
pub mod messages;
pub mod nn;
pub mod orchestrator;
pub mod rng;

pub use config::{ExperimentConfig, Mode};
pub use error::{Error, Result};
pub use experiment::{run_experiment, RunOutput, RunSummary};
pub use matrix::Matrix;
