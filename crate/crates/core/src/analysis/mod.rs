//! Measurement pipeline: sideband fits, ratio thermometry, cooling-curve fits.

mod curve;
mod lineshape;
mod sidebands;
mod thermometry;

use serde::{Deserialize, Serialize};

pub use curve::{
    detuning_sweep_summary, fit_cooling_curve, CoolingCurveResult, CurveOptions, SweepRow, SweepSummary,
    NEAR_DIVERGENCE_FRACTION,
};
pub use lineshape::{fit_lorentzian, LorentzianFit};
pub use sidebands::{fit_sidebands, initial_guess, SidebandFit};
pub use thermometry::{
    estimate_s, occupation_series, ClassicalMean, OccupationPoint, RatioCurveFit, SEstimate, CLASSICAL_THRESHOLD,
};

/// Conditions attached to points, curves and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flag {
    /// Measured ratio at or below the susceptibility floor.
    Unphysical,
    /// No points above the classical threshold for the window estimator.
    ClassicalEstimatorUnavailable,
    /// The two s estimators differ by more than 3σ.
    EstimatorDisagreement,
    /// The Γ_opt grid spans less than one decade.
    DegenerateSpan,
    /// The backaction limit is not resolved by the data.
    #[serde(rename = "n-ba-unidentifiable")]
    NbaUnidentifiable,
    /// The bath occupation is not resolved by the data.
    N0Unidentifiable,
    /// Every point sits below the ground-state crossover n₀Γ₀.
    ClassicalRegimeOnly,
    /// The strongest drive reaches the backaction crossover (n₀/n_ba)Γ₀.
    BackactionLimited,
    /// Detuning close enough to resonance that n_ba diverges.
    NearDivergence,
    /// Fewer detunings than a meaningful sweep needs.
    DegenerateSweep,
    /// A stage failed for this entry.
    Failed,
}

impl Flag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Flag::Unphysical => "unphysical",
            Flag::ClassicalEstimatorUnavailable => "classical-estimator-unavailable",
            Flag::EstimatorDisagreement => "estimator-disagreement",
            Flag::DegenerateSpan => "degenerate-span",
            Flag::NbaUnidentifiable => "n-ba-unidentifiable",
            Flag::N0Unidentifiable => "n0-unidentifiable",
            Flag::ClassicalRegimeOnly => "classical-regime-only",
            Flag::BackactionLimited => "backaction-limited",
            Flag::NearDivergence => "near-divergence",
            Flag::DegenerateSweep => "degenerate-sweep",
            Flag::Failed => "failed",
        }
    }

    pub fn join(flags: &[Flag]) -> String {
        flags.iter().map(Flag::as_str).collect::<Vec<_>>().join(";")
    }
}
