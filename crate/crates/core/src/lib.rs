//! Multi-output regression with deep structured mixtures of single-output
//! Gaussian-process experts.
//!
//! A [`circuit::Circuit`] recursively partitions the covariate space and the
//! output space. Its leaves are exact GP experts ([`gp_leaf::GpLeaf`]); sum
//! nodes mix alternative partitions. Because the circuit is smooth and
//! decomposable, the marginal likelihood and the posterior over sum weights
//! are exact ([`inference`]), and the predictive distribution at a test point
//! is a Gaussian mixture that is summarised by its first two moments.

pub mod circuit;
pub mod config;
pub mod data;
pub mod error;
pub mod gp_leaf;
pub mod image;
pub mod inference;
pub mod math;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod region;
pub mod training;

pub use error::{Error, Result};
