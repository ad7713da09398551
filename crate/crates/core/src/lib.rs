//! Adversarial robustness toolkit for time series models.
//!
//! The crate trains seven recurrent and convolutional architectures on
//! sliding-window regression and classification tasks, attacks them with
//! FGSM, BIM and PGD, hardens them with min-max adversarial training, and
//! assembles clean / attacked / defended evaluation matrices.

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod defense;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
