//! Experiment configuration. Every frequency here is ordinary frequency (Hz).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::physics::{hz_to_angular, SystemParams};
use crate::synth::GridSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub kappa_hz: f64,
    pub omega_m_hz: f64,
    pub gamma_0_hz: f64,
    pub efficiency: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            kappa_hz: 2.6e6,
            omega_m_hz: 1.48e6,
            gamma_0_hz: 0.18,
            efficiency: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Fixed averaging count. When absent it is sized from `target_sigma_n`.
    pub n_avg: Option<f64>,
    /// Target σ of n̄ at the strongest drive, used when `n_avg` is absent.
    pub target_sigma_n: f64,
    pub grid: GridSpec,
    pub oracle_duration_s: f64,
    pub oracle_rate_hz: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            n_avg: None,
            target_sigma_n: 0.02,
            grid: GridSpec::default(),
            oracle_duration_s: 1e-3,
            oracle_rate_hz: 1e8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Systematics {
    /// Flat substrate excess over shot noise, in shot-noise units.
    pub background_fraction: f64,
    /// Classical amplitude noise as a fraction of shot noise.
    pub amp_noise: f64,
    /// Classical phase noise as a fraction of shot noise.
    pub phase_noise: f64,
    /// Overrides the calibrated laser-noise scale.
    pub laser_noise_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Fit Γ₀ jointly with the cooling curve instead of fixing it.
    pub fit_gamma_0: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    /// Laser detunings from the cavity, negative for red.
    pub detunings_hz: Vec<f64>,
    pub gamma_opt_grid_hz: Vec<f64>,
    pub bath_temperature_k: f64,
    pub synthesis: SynthesisConfig,
    pub systematics: Systematics,
    pub analysis: AnalysisConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Optional Γ_opt per unit laser power (Hz/W), only used to label outputs.
    pub gamma_opt_per_watt_hz: Option<f64>,
}

/// `count` points spaced evenly in log between `lo` and `hi`, inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).ln();
    (0..count)
        .map(|i| lo * (ratio * i as f64 / (count - 1) as f64).exp())
        .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            detunings_hz: vec![-1.62e6],
            gamma_opt_grid_hz: log_grid(1.0, 3e4, 20),
            bath_temperature_k: 0.36,
            synthesis: SynthesisConfig::default(),
            systematics: Systematics::default(),
            analysis: AnalysisConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 1,
            gamma_opt_per_watt_hz: None,
        }
    }
}

fn field(name: &str, reason: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {reason}"))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(name, format!("must be finite and > 0, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        positive("system.kappa_hz", s.kappa_hz)?;
        positive("system.omega_m_hz", s.omega_m_hz)?;
        positive("system.gamma_0_hz", s.gamma_0_hz)?;
        if !(s.efficiency > 0.0 && s.efficiency <= 1.0) {
            return Err(field(
                "system.efficiency",
                format!("must lie in (0, 1], got {}", s.efficiency),
            ));
        }
        if !(s.gamma_0_hz < s.omega_m_hz) {
            return Err(field("system.gamma_0_hz", "must be below omega_m_hz"));
        }
        if self.detunings_hz.is_empty() {
            return Err(field("detunings_hz", "must not be empty"));
        }
        for (i, d) in self.detunings_hz.iter().enumerate() {
            if !(*d < 0.0 && d.is_finite()) {
                return Err(field(
                    &format!("detunings_hz[{i}]"),
                    format!("must be negative (red), got {d}"),
                ));
            }
        }
        if self.gamma_opt_grid_hz.is_empty() {
            return Err(field("gamma_opt_grid_hz", "must not be empty"));
        }
        for (i, g) in self.gamma_opt_grid_hz.iter().enumerate() {
            positive(&format!("gamma_opt_grid_hz[{i}]"), *g)?;
        }
        positive("bath_temperature_k", self.bath_temperature_k)?;
        let syn = &self.synthesis;
        if let Some(n) = syn.n_avg {
            if !(n >= 1.0 && n.is_finite()) {
                return Err(field("synthesis.n_avg", format!("must be finite and >= 1, got {n}")));
            }
        }
        positive("synthesis.target_sigma_n", syn.target_sigma_n)?;
        positive("synthesis.oracle_duration_s", syn.oracle_duration_s)?;
        positive("synthesis.oracle_rate_hz", syn.oracle_rate_hz)?;
        if !(syn.oracle_rate_hz > 4.0 * s.omega_m_hz) {
            return Err(field("synthesis.oracle_rate_hz", "must exceed 4 x omega_m_hz"));
        }
        match syn.grid {
            GridSpec::Windows {
                half_width_linewidths,
                bins_per_linewidth,
            } => {
                positive("synthesis.grid.half_width_linewidths", half_width_linewidths)?;
                if !(bins_per_linewidth >= 10.0) {
                    return Err(field(
                        "synthesis.grid.bins_per_linewidth",
                        format!("must be >= 10, got {bins_per_linewidth}"),
                    ));
                }
            }
            GridSpec::Uniform {
                half_span_hz,
                resolution_hz,
            } => {
                positive("synthesis.grid.half_span_hz", half_span_hz)?;
                positive("synthesis.grid.resolution_hz", resolution_hz)?;
                if !(half_span_hz > s.omega_m_hz) {
                    return Err(field("synthesis.grid.half_span_hz", "must exceed omega_m_hz"));
                }
            }
        }
        let sys = &self.systematics;
        for (name, v) in [
            ("systematics.background_fraction", sys.background_fraction),
            ("systematics.amp_noise", sys.amp_noise),
            ("systematics.phase_noise", sys.phase_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(field(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if let Some(k) = sys.laser_noise_scale {
            positive("systematics.laser_noise_scale", k)?;
        }
        if let Some(k) = self.gamma_opt_per_watt_hz {
            positive("gamma_opt_per_watt_hz", k)?;
        }
        Ok(())
    }

    /// Device parameters in internal angular units.
    pub fn system_params(&self) -> Result<SystemParams> {
        let s = &self.system;
        SystemParams::from_hz(s.kappa_hz, s.omega_m_hz, s.gamma_0_hz, s.efficiency)
    }

    pub fn detunings(&self) -> Vec<f64> {
        self.detunings_hz.iter().map(|&d| hz_to_angular(d)).collect()
    }

    pub fn gamma_opt_grid(&self) -> Vec<f64> {
        self.gamma_opt_grid_hz.iter().map(|&g| hz_to_angular(g)).collect()
    }

    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
