//! Interpretable LSTM pipeline for predicting future childhood BMI and
//! obesity status from longitudinal EHR-style records.

pub mod baselines;
pub mod cohort;
pub mod ehr;
pub mod error;
pub mod eval;
pub mod growth;
pub mod interpret;
pub mod model;
pub mod nnet;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
