//! Statistical matching and measurement-error correction by parametric
//! fractional imputation.

pub mod data;
pub mod engine;
pub mod measurement;
pub mod error;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod scoretest;
pub mod simlab;
pub mod splitq;
pub mod twostage;
pub mod variance;

pub use error::{FiError, Result};
