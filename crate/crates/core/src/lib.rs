//! Reconstruction of option-implied risk-neutral densities from quote
//! surfaces, physical densities from a GARCH model with event jumps, pricing
//! kernels and risk-aversion estimates, jump-diffusion calibration, and
//! fixed-effects panel estimators — with synthetic generators so the whole
//! pipeline is verifiable end to end.

pub mod config;
pub mod error;
pub mod garch;
pub mod jumps;
pub mod kernel;
pub mod math;
pub mod panel;
pub mod pipeline;
pub mod pricing;
pub mod quotes;
pub mod repair;
pub mod rnd;

pub use error::{Error, Result};
