//! Covariance density neural networks.
//!
//! Covariance matrices are mapped to Gibbs-type density operators
//! `ρ(C) = exp(-βC) / Tr exp(-βC)`, which serve as graph shift operators for
//! polynomial filters, perceptrons and multi-scale filter bank layers. The
//! crate also provides the multiscale von Neumann entropy of a covariance
//! matrix, inverse-temperature fitting and a set of seeded experiments.

pub mod betafit;
pub mod cli;
pub mod config;
pub mod covariance;
pub mod density;
pub mod entropy;
pub mod error;
pub mod filtering;
pub mod forecast;
pub mod lab;
pub mod network;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
