//! Generative speaker profiles: a VAE over reference utterances with an
//! optional triplet loss and reference shuffling, a synthetic corpus with
//! known factors, and the metrics used to compare profile generators.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalmetrics;
pub mod latent;
pub mod ndcore;
pub mod sampler;
pub mod seeding;
pub mod toycorpus;
pub mod vae;
pub mod verify;

pub use error::{Error, Result};

/// Double-precision instantiations, used by the training and evaluation paths.
pub type Matrix64 = ndcore::Matrix<f64>;
pub type ModelParams64 = vae::ModelParams<f64>;
pub type Trainer64 = vae::Trainer<f64>;
pub type Verifier64 = verify::Verifier<f64>;
pub type Profile64 = latent::SyntheticProfile<f64>;

/// Single-precision instantiations for inference on converted checkpoints.
pub type Matrix32 = ndcore::Matrix<f32>;
pub type ModelParams32 = vae::ModelParams<f32>;
pub type Verifier32 = verify::Verifier<f32>;
pub type Profile32 = latent::SyntheticProfile<f32>;
