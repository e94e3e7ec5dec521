//! MultiResFormer: a transformer forecaster whose blocks patch the input at
//! the periodicities detected in it, run a shared encoder block per
//! resolution, and blend the branches by spectral amplitude.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
