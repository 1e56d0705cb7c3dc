//! Reproducible runs of the Casimir pipeline: theory tables, calibration
//! and force extraction from AFM curves, and theory-experiment comparison.
//!
//! Every run reads one [`config::RunConfig`] and writes its outputs, a
//! summary and the resolved config into a fresh timestamped directory.

// `!(x > 0.0)` is deliberate: NaN has to fail every validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod compare;
pub mod config;
pub mod error;
pub mod table;

pub use error::{CliError, Result};
