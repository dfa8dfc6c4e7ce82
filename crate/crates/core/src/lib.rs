//! Deep structural causal model engine.
//!
//! Trains flow-based and amortised variational mechanisms over a causal DAG
//! and answers observational, interventional, and counterfactual queries,
//! with a synthetic stroke dataset providing ground-truth counterfactuals
//! for verification.

pub mod error;
pub mod numerics;
pub mod distributions;
pub mod transforms;
pub mod mechanisms;
pub mod scm;
pub mod synthdata;
pub mod evaluation;
pub mod config;
pub mod checkpoint;
pub mod train;

pub use error::{Error, Result};
