//! Explainability-based adversarial-sample detection.
//!
//! Victim classifiers are attacked with gradient-based generators, their predictions
//! are explained with SHAP attributions, and detectors flag inputs whose attribution
//! maps drift from the genuine distribution.

pub mod error;
pub mod harness;
pub mod attacks;
pub mod attribution;
pub mod data;
pub mod detectors;
pub mod nn;
pub mod stats;
pub mod victims;

pub use error::{Error, Result};
