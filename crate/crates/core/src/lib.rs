//! Differentially private federated learning with noising before aggregation.
//!
//! Clients train locally with a proximal term, clip their parameters, add
//! Gaussian noise and upload; the server averages, optionally adds more noise
//! and broadcasts. The crate covers noise calibration ([`privacy`]), models
//! and the local solver ([`learning`]), datasets ([`data`]), the training loop
//! ([`orchestrator`]) and closed-form convergence bounds ([`bounds`]).

pub mod bounds;
pub mod data;
pub mod error;
pub mod learning;
pub mod orchestrator;
pub mod privacy;
pub mod rng;

pub use error::{Error, IdxError, Result};
