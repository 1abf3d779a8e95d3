//! Bayesian inference of binary outcomes from prediction-market price and
//! volume histories under a latent three-type trader model.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod inference;
pub mod klgap;
pub mod kv;
pub mod logodds;
pub mod model;
pub mod optim;
pub mod rng;
pub mod simulate;
pub mod vi;

pub use error::{Error, Result};
