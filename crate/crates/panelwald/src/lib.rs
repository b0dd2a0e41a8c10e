//! Structural-equation-modeling engine for panel causal models (RI-CLPM and
//! CLPM) with a two-stage LM-Wald diagnostic for unmeasured confounding and a
//! Monte Carlo harness for calibration and detection studies.

pub mod closed_form;
pub mod dsl;
pub mod error;
pub mod estimator;
pub mod optim;
pub mod prob;
pub mod ram;
pub mod scenarios;
pub mod score;
pub mod sim;
pub mod twoslw;

pub use error::{Error, Result};
