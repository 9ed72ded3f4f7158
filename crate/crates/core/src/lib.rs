//! GCT: two task models learn from labeled and unlabeled images, steered by
//! a flaw detector that predicts where each model's output is wrong.
//!
//! Step 1 updates both task models with the detector fixed: a supervised term
//! on labeled images, a consistency term that copies the less flawed model
//! pixel by pixel, and a correction term that drives the detector's output
//! towards zero. Step 2 fits the detector to the blurred and dilated error of
//! each model on labeled images.

pub mod baselines;
pub mod config;
pub mod constraints;
pub mod data;
pub mod error;
pub mod experiment;
pub mod flawmap;
pub mod maps;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod trainer;

pub use error::{GctError, Result};
