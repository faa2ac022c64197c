//! Closed-form sideband cooling relations.
//!
//! Every rate and frequency in this module is an angular frequency (rad/s).
//! Conversion from ordinary frequency happens once, at the configuration
//! boundary (see [`SystemParams::from_hz`]).
//!
//! Sign convention: a negative detuning is red of the cavity. The anti-Stokes
//! sideband sits at `Δ + ω_m` in the cavity susceptibility, the Stokes sideband
//! at `Δ − ω_m`. At `Δ = −ω_m` the anti-Stokes weight is resonant.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Boltzmann constant, J/K (exact, SI 2019).
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Reduced Planck constant, J s.
pub const HBAR: f64 = 1.054_571_817e-34;

#[inline]
pub fn hz_to_angular(f: f64) -> f64 {
    2.0 * PI * f
}

#[inline]
pub fn angular_to_hz(w: f64) -> f64 {
    w / (2.0 * PI)
}

/// Cavity and mechanical constants of one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Cavity full linewidth κ.
    pub kappa: f64,
    /// Mechanical resonance ω_m.
    pub omega_m: f64,
    /// Intrinsic mechanical damping Γ₀.
    pub gamma_0: f64,
    /// Total detection efficiency ε.
    pub efficiency: f64,
}

impl SystemParams {
    pub fn new(kappa: f64, omega_m: f64, gamma_0: f64, efficiency: f64) -> Result<Self> {
        let p = Self {
            kappa,
            omega_m,
            gamma_0,
            efficiency,
        };
        p.validate()?;
        Ok(p)
    }

    /// Build from ordinary frequencies in Hz.
    pub fn from_hz(kappa_hz: f64, omega_m_hz: f64, gamma_0_hz: f64, efficiency: f64) -> Result<Self> {
        Self::new(
            hz_to_angular(kappa_hz),
            hz_to_angular(omega_m_hz),
            hz_to_angular(gamma_0_hz),
            efficiency,
        )
    }

    /// The membrane device: κ = 2π×2.6 MHz, ω_m = 2π×1.48 MHz, Γ₀ = 2π×0.18 Hz, ε = 0.04.
    pub fn membrane_device() -> Self {
        Self::from_hz(2.6e6, 1.48e6, 0.18, 0.04).expect("reference parameters are valid")
    }

    pub fn validate(&self) -> Result<()> {
        positive("kappa", self.kappa)?;
        positive("omega_m", self.omega_m)?;
        positive("gamma_0", self.gamma_0)?;
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(invalid(
                "efficiency",
                format!("must lie in (0, 1], got {}", self.efficiency),
            ));
        }
        if self.gamma_0 >= self.omega_m {
            return Err(invalid(
                "gamma_0",
                format!(
                    "high-Q assumption requires gamma_0 < omega_m ({} >= {})",
                    self.gamma_0, self.omega_m
                ),
            ));
        }
        Ok(())
    }

    /// Lorentzian cavity weight at offset `x` from resonance, up to a common factor.
    #[inline]
    fn inverse_weight(&self, x: f64) -> f64 {
        let half = 0.5 * self.kappa;
        half * half + x * x
    }
}

fn positive(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite and > 0, got {v}")))
    }
}

fn require_red(delta: f64) -> Result<()> {
    if delta.is_finite() && delta < 0.0 {
        Ok(())
    } else {
        Err(Error::RedDetuningRequired { detuning: delta })
    }
}

/// Stokes/anti-Stokes susceptibility ratio s at detuning `delta`.
pub fn sideband_ratio(delta: f64, params: &SystemParams) -> Result<f64> {
    require_red(delta)?;
    let anti_stokes = params.inverse_weight(delta + params.omega_m);
    let stokes = params.inverse_weight(delta - params.omega_m);
    Ok(anti_stokes / stokes)
}

/// Quantum backaction limit n_ba(Δ) in phonons.
pub fn backaction_limit(delta: f64, params: &SystemParams) -> Result<f64> {
    require_red(delta)?;
    let w = params.omega_m;
    Ok(-params.inverse_weight(w + delta) / (4.0 * w * delta))
}

/// Detuning minimising the backaction limit, and the minimum itself.
pub fn optimal_detuning(params: &SystemParams) -> (f64, f64) {
    let w = params.omega_m;
    let delta = -w * (1.0 + params.kappa * params.kappa / (4.0 * w * w)).sqrt();
    let n_min = backaction_limit(delta, params).expect("optimal detuning is red");
    (delta, n_min)
}

/// Steady-state occupation from the cooling rate equation.
///
/// Only the ratio of the two rates matters, so any common unit works.
pub fn steady_state_occupation(n0: f64, gamma_0: f64, n_ba: f64, gamma_opt: f64) -> f64 {
    if gamma_opt.is_infinite() {
        return n_ba;
    }
    (n0 * gamma_0 + n_ba * gamma_opt) / (gamma_0 + gamma_opt)
}

/// Outcome of ratio thermometry on a single measured ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioOccupation {
    Physical(f64),
    /// The measured ratio fell at or below the susceptibility floor.
    Unphysical {
        ratio: f64,
        s: f64,
    },
}

impl RatioOccupation {
    pub fn value(&self) -> Option<f64> {
        match *self {
            RatioOccupation::Physical(n) => Some(n),
            RatioOccupation::Unphysical { .. } => None,
        }
    }

    pub fn is_physical(&self) -> bool {
        matches!(self, RatioOccupation::Physical(_))
    }
}

/// Invert `1/n̄ = R/s − 1`.
pub fn occupation_from_ratio(ratio: f64, s: f64) -> Result<RatioOccupation> {
    if !(s > 0.0 && s < 1.0) {
        return Err(invalid("s", format!("must lie in (0, 1), got {s}")));
    }
    if !(ratio > 0.0) || ratio.is_nan() {
        return Err(invalid("ratio", format!("must be > 0, got {ratio}")));
    }
    if ratio.is_infinite() {
        return Ok(RatioOccupation::Physical(0.0));
    }
    if ratio <= s {
        return Ok(RatioOccupation::Unphysical { ratio, s });
    }
    // s / (R - s) is the same quantity with one fewer rounding step.
    Ok(RatioOccupation::Physical(s / (ratio - s)))
}

/// Bath occupation n₀ = k_B T / ħω_m.
pub fn thermal_occupation(temperature: f64, omega_m: f64) -> Result<f64> {
    positive("temperature", temperature)?;
    positive("omega_m", omega_m)?;
    Ok(BOLTZMANN * temperature / (HBAR * omega_m))
}

pub fn temperature_from_occupation(n0: f64, omega_m: f64) -> Result<f64> {
    positive("n0", n0)?;
    positive("omega_m", omega_m)?;
    Ok(n0 * HBAR * omega_m / BOLTZMANN)
}

/// Bath occupation paired with its temperature and the current mode occupation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathState {
    pub n0: f64,
    pub t0: f64,
    pub n_bar: f64,
}

impl BathState {
    pub fn from_temperature(t0: f64, omega_m: f64, n_bar: f64) -> Result<Self> {
        let n0 = thermal_occupation(t0, omega_m)?;
        if !(n_bar >= 0.0) {
            return Err(invalid("n_bar", format!("must be >= 0, got {n_bar}")));
        }
        Ok(Self { n0, t0, n_bar })
    }

    pub fn from_occupation(n0: f64, omega_m: f64, n_bar: f64) -> Result<Self> {
        let t0 = temperature_from_occupation(n0, omega_m)?;
        if !(n_bar >= 0.0) {
            return Err(invalid("n_bar", format!("must be >= 0, got {n_bar}")));
        }
        Ok(Self { n0, t0, n_bar })
    }
}

/// One drive setting with its derived per-quantum scattering rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoolingPoint {
    pub detuning: f64,
    pub gamma_opt: f64,
    pub s_ratio: f64,
    pub n_ba: f64,
    /// A₊, Stokes rate per (n̄ + 1).
    pub rate_stokes_per_quantum: f64,
    /// A₋, anti-Stokes rate per n̄.
    pub rate_antistokes_per_quantum: f64,
}

impl CoolingPoint {
    pub fn new(params: &SystemParams, detuning: f64, gamma_opt: f64) -> Result<Self> {
        if !(gamma_opt >= 0.0) || !gamma_opt.is_finite() {
            return Err(invalid(
                "gamma_opt",
                format!("must be finite and >= 0, got {gamma_opt}"),
            ));
        }
        let s = sideband_ratio(detuning, params)?;
        let n_ba = backaction_limit(detuning, params)?;
        let (plus, minus) = per_quantum_rates(s, gamma_opt)?;
        Ok(Self {
            detuning,
            gamma_opt,
            s_ratio: s,
            n_ba,
            rate_stokes_per_quantum: plus,
            rate_antistokes_per_quantum: minus,
        })
    }

    /// Same detuning, different drive strength.
    pub fn with_gamma_opt(&self, gamma_opt: f64) -> Result<Self> {
        if !(gamma_opt >= 0.0) || !gamma_opt.is_finite() {
            return Err(invalid(
                "gamma_opt",
                format!("must be finite and >= 0, got {gamma_opt}"),
            ));
        }
        let (plus, minus) = per_quantum_rates(self.s_ratio, gamma_opt)?;
        Ok(Self {
            gamma_opt,
            rate_stokes_per_quantum: plus,
            rate_antistokes_per_quantum: minus,
            ..*self
        })
    }
}

fn per_quantum_rates(s: f64, gamma_opt: f64) -> Result<(f64, f64)> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::NoNetCooling { s });
    }
    let minus = gamma_opt / (1.0 - s);
    // A₋ − A₊ must equal Γ_opt exactly, so derive A₊ from the difference.
    let plus = minus - gamma_opt;
    Ok((plus, minus))
}

/// Total Stokes (Γ₊) and anti-Stokes (Γ₋) scattering rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RamanRates {
    pub stokes: f64,
    pub antistokes: f64,
}

pub fn raman_rates(point: &CoolingPoint, n_bar: f64) -> Result<RamanRates> {
    if !(point.s_ratio > 0.0 && point.s_ratio < 1.0) {
        return Err(Error::NoNetCooling { s: point.s_ratio });
    }
    if !(n_bar >= 0.0) {
        return Err(invalid("n_bar", format!("must be >= 0, got {n_bar}")));
    }
    Ok(RamanRates {
        stokes: point.rate_stokes_per_quantum * (n_bar + 1.0),
        antistokes: point.rate_antistokes_per_quantum * n_bar,
    })
}

/// Drive strengths separating the cooling regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeBoundaries {
    /// Γ_opt ≈ Γ₀: optical damping starts to matter.
    pub onset: f64,
    /// Γ_opt ≈ n₀Γ₀: the mode approaches the ground state.
    pub ground_state: f64,
    /// Γ_opt ≈ (n₀/n_ba)Γ₀: backaction equals thermal drive.
    pub backaction: f64,
    /// Set when the ordering onset < ground_state < backaction breaks down.
    pub degenerate: bool,
}

pub fn regime_boundaries(n0: f64, n_ba: f64, gamma_0: f64) -> Result<RegimeBoundaries> {
    positive("n0", n0)?;
    positive("n_ba", n_ba)?;
    positive("gamma_0", gamma_0)?;
    let onset = gamma_0;
    let ground_state = n0 * gamma_0;
    let backaction = n0 / n_ba * gamma_0;
    Ok(RegimeBoundaries {
        onset,
        ground_state,
        backaction,
        degenerate: !(onset < ground_state && ground_state < backaction),
    })
}
