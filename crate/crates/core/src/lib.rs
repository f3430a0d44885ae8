//! Model-zoo-guided augmentation for few-shot time series forecasting.
//!
//! The library trains a k-fold zoo of small forecasting models, ranks training
//! windows by the disagreement (prediction-error variance) of zoo members that
//! never saw them, trains a variational masked autoencoder on the most
//! disagreement-prone windows, sharpens its prior with a policy-gradient loop
//! whose reward is that same zoo disagreement, and finally retrains a
//! forecaster on the original windows plus the generated ones.
//!
//! Everything is deterministic given a master seed: random draws go through
//! counter-based ChaCha streams derived per purpose, and all artifacts are
//! written in stable orders.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod forecaster;
pub mod gaussian;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod ranking;
pub mod reinforce;
pub mod seeding;
pub mod tensor;
pub mod vmae;

pub use error::{Error, Result};
