use thiserror::Error;

use crate::analysis::SidebandFit;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("red detuning required (got {detuning} rad/s)")]
    RedDetuningRequired { detuning: f64 },

    #[error("sideband ratio s = {s} does not give net cooling")]
    NoNetCooling { s: f64 },

    #[error("integration step {step} s too coarse: must be <= 0.1/omega_m = {limit} s")]
    StepTooCoarse { step: f64, limit: f64 },

    #[error("degenerate segmentation: {0}")]
    Segmentation(String),

    #[error("spectrum does not cover both sidebands: {0}")]
    Coverage(String),

    #[error("insufficient visibility: best sideband SNR {snr:.3} < 1")]
    InsufficientVisibility { snr: f64 },

    #[error("fit did not converge after {iterations} iterations")]
    NotConverged { iterations: usize, best: Box<SidebandFit> },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("{0}")]
    InsufficientData(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Schema { path: String, line: usize, message: String },

    #[error("missing metadata key `{key}` in {path}")]
    MissingMetadata { key: String, path: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field,
        reason: reason.into(),
    }
}
