//! Deterministic simulator of federated face-verification training.
//!
//! Edge devices hold private per-identity feature-vector datasets and train
//! local models (a supervised MLP verifier or an autoencoder). A central
//! orchestrator averages the local models each round, either in plaintext
//! (classic FedAvg) or through a masking-based secure aggregator that learns
//! only the sum of fixed-point-encoded submissions. Impostor training data
//! comes from cross-identity sampling or a small GAN. Evaluation reports
//! per-device equal error rates, distribution summaries, and Welch t-tests.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fed;
pub mod gan;
pub mod mlp;
pub mod model;
pub mod param;
pub mod secure;
pub mod seeding;

pub use error::{FedverError, Result};
