//! Simulation and analysis of optomechanical sideband cooling near the
//! quantum backaction limit.
//!
//! Internally every rate and frequency is angular (rad/s). Configuration and
//! file I/O use ordinary frequency (Hz); conversion happens at that boundary.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod error;
pub mod io;
pub mod lm;
pub mod physics;
pub mod pipeline;
pub mod spectra;
pub mod synth;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
