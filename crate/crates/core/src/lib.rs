//! Rare-event probabilities of SDEs by importance sampling under an approximate Doob transform.
//!
//! The pipeline fits Koopman generator eigenfunctions with generator EDMD ([`gedmd`]), regresses
//! the terminal observable onto them, evolves the expansion backward in time and biases the
//! dynamics with `u = c B^T grad log Phi` ([`doob`]). Ensembles are reweighted with Girsanov
//! log-weights ([`paths`], [`estimator`]).

pub mod basis;
pub mod config;
pub mod doob;
pub mod error;
pub mod estimator;
pub mod gedmd;
pub mod linalg;
pub mod model;
pub mod paths;
pub mod runner;
pub mod spde;

pub use error::{Error, Result};
