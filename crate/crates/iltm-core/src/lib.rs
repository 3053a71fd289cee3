//! Tabular meta-learning toolkit: GBDT leaf embeddings with robust
//! preprocessing, a random-feature + PCA projection to a fixed width, a
//! meta-trained hypernetwork that generates per-task MLP weights, and
//! retrieval-augmented prediction with optional fine-tuning and ensembling.
//!
//! The crate is organized bottom-up:
//! - [`tabular`]: datasets, schemas, splits, metrics
//! - [`preprocess`]: robust scaling / one-hot path and the combined ψ(x)
//! - [`gbdt`]: histogram gradient boosting and leaf one-hot embeddings
//! - [`projection`]: random features and PCA to the fixed main-network width
//! - [`tape`]: fixed-operator reverse-mode autodiff
//! - [`hypernet`]: weight generation, the main network, retrieval logits
//! - [`meta`]: meta-training loop, checkpoints, validation
//! - [`inference`]: fit/predict with ensembling, fine-tuning, regression
//! - [`dedupe`]: dataset near-duplicate detection pipeline
//! - [`hp`]: hyperparameter space sampling
//!
//! All randomness flows through [`rng`] seed derivation, so every artifact a
//! run produces can be regenerated bit-identically from its manifest.

pub mod container;
pub mod dedupe;
pub mod error;
pub mod gbdt;
pub mod hp;
pub mod linalg;
pub mod meta;
pub mod preprocess;
pub mod projection;
pub mod rng;
pub mod synth;
pub mod hypernet;
pub mod inference;
pub mod tabular;
pub mod tape;

pub use error::{Error, Result};
